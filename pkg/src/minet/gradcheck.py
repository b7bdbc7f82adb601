"""Central finite-difference verification of gradients.

Every check builds a scalar from the graph under test (via a fixed random
projection), runs one backward pass, then compares each analytic gradient
entry against central difference quotients at randomly chosen coordinates.
The reported figure is the worst relative error
|analytic - numeric| / max(|analytic| + |numeric|, 1e-5).

Two guards keep the comparison honest about FD's own limits:

* Denominator floor: for a unit-scale loss the difference quotient carries
  cancellation noise of roughly machine-eps * sqrt(#flops) / (2 eps)
  ~ 1e-9 - 1e-8, so gradient entries below that are unresolvable by FD no
  matter how correct the code is; the floor turns those entries into an
  absolute comparison at tol * 1e-5, which still catches any term that is
  dropped, doubled, or mis-scattered.

* Stencil refinement: each coordinate is probed at widths eps and eps/2
  plus the Richardson extrapolation of the two. Smooth truncation error
  shrinks as O(eps^2) and a ReLU kink inside the stencil contaminates the
  quotient by O(eps), so artifacts of the probe itself fade under
  refinement, while a genuinely wrong analytic gradient disagrees with
  every estimate. Each coordinate scores its best match among the three.
"""

import numpy as np

from . import autodiff as ad
from . import model
from .autodiff import Tensor

DEFAULT_EPS = 1e-5
DENOM_FLOOR = 1e-5
OP_TOL = 1e-4
FULL_MODEL_TOL = 1e-3


def fd_max_rel_err(build, tensors, n_coords=20, eps=DEFAULT_EPS, rng=None):
    """Worst relative FD error over >= n_coords random coordinates of every
    tensor in `tensors`. `build` must recompute the scalar from the
    tensors' current data."""
    rng = np.random.default_rng(0) if rng is None else rng
    for t in tensors:
        t.grad = None
    build().backward()
    saved = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, grad in zip(tensors, saved):
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        if flat.size <= n_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        for k in coords:
            old = flat[k]
            estimates = []
            for h in (eps, eps / 2.0):
                flat[k] = old + h
                f_plus = build().item()
                flat[k] = old - h
                f_minus = build().item()
                estimates.append((f_plus - f_minus) / (2.0 * h))
            flat[k] = old
            estimates.append((4.0 * estimates[1] - estimates[0]) / 3.0)
            rel = min(abs(gflat[k] - n)
                      / max(abs(gflat[k]) + abs(n), DENOM_FLOOR)
                      for n in estimates)
            worst = max(worst, rel)
    return worst


def _projector(shape, rng):
    proj = Tensor(rng.standard_normal(shape))
    return lambda out: ad.tsum(ad.mul(out, proj))


def check_ops(seed=0, n_coords=20):
    """Gradient checks for each primitive op; returns name -> worst error."""
    rng = np.random.default_rng(seed)
    results = {}

    x = Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (4, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
    p = _projector((2, 4, 8, 8), rng)
    results["conv2d_3x3"] = fd_max_rel_err(
        lambda: p(ad.conv2d(x, w, b, stride=1, padding=1)), [x, w, b],
        n_coords, rng=rng)

    p2 = _projector((2, 4, 3, 3), rng)
    results["conv2d_strided"] = fd_max_rel_err(
        lambda: p2(ad.conv2d(x, w, b, stride=3, padding=1)), [x, w, b],
        n_coords, rng=rng)

    w1 = Tensor(rng.uniform(-1, 1, (5, 3, 1, 1)), requires_grad=True)
    b1 = Tensor(rng.uniform(-1, 1, 5), requires_grad=True)
    p3 = _projector((2, 5, 8, 8), rng)
    results["conv2d_1x1"] = fd_max_rel_err(
        lambda: p3(ad.conv2d(x, w1, b1)), [x, w1, b1], n_coords, rng=rng)

    v = Tensor(rng.uniform(-1, 1, (2, 1, 4, 6, 6)), requires_grad=True)
    w3 = Tensor(rng.uniform(-1, 1, (1, 1, 3, 3, 3)), requires_grad=True)
    b3 = Tensor(rng.uniform(-1, 1, 1), requires_grad=True)
    p4 = _projector((2, 1, 4, 6, 6), rng)
    results["conv3d"] = fd_max_rel_err(
        lambda: p4(ad.conv3d(v, w3, b3)), [v, w3, b3], n_coords, rng=rng)

    a = Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
    m = Tensor(rng.uniform(-1, 1, (5, 3)), requires_grad=True)
    p5 = _projector((4, 3), rng)
    results["matmul"] = fd_max_rel_err(
        lambda: p5(ad.matmul(a, m)), [a, m], n_coords, rng=rng)

    p6 = _projector((4, 5), rng)
    results["softmax_rows"] = fd_max_rel_err(
        lambda: p6(ad.softmax_rows(a)), [a], n_coords, rng=rng)

    e1 = Tensor(rng.uniform(-1, 1, (3, 7)), requires_grad=True)
    e2 = Tensor(rng.uniform(-1, 1, (3, 7)), requires_grad=True)
    gate = Tensor(np.array([0.37]), requires_grad=True)
    p7 = _projector((3, 7), rng)
    results["elementwise"] = fd_max_rel_err(
        lambda: p7(ad.add(ad.mul(ad.sigmoid(e1), e2),
                          ad.scale(ad.sub(e2, e1), gate))),
        [e1, e2, gate], n_coords, rng=rng)

    # keep relu inputs away from the kink so the FD probe stays one-sided
    r_in = rng.uniform(-1, 1, (4, 6))
    r_in[np.abs(r_in) < 0.05] = 0.25
    e3 = Tensor(r_in, requires_grad=True)
    p8 = _projector((4, 6), rng)
    results["relu"] = fd_max_rel_err(lambda: p8(ad.relu(e3)), [e3],
                                     n_coords, rng=rng)

    c1 = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)), requires_grad=True)
    c2 = Tensor(rng.uniform(-1, 1, (1, 3, 4, 4)), requires_grad=True)
    p9 = _projector((1, 5, 4, 4), rng)
    results["concat"] = fd_max_rel_err(
        lambda: p9(ad.concat([c1, c2], axis=1)), [c1, c2], n_coords, rng=rng)

    p10 = _projector((3, 4, 1), rng)
    results["reshape_transpose"] = fd_max_rel_err(
        lambda: p10(ad.reshape(ad.transpose(ad.matmul(a, m), (1, 0)),
                               (3, 4, 1))),
        [a, m], n_coords, rng=rng)

    g1 = Tensor(rng.uniform(-1, 1, (2, 3, 5, 5)), requires_grad=True)
    p11 = _projector((2, 3, 1, 1), rng)
    results["global_avg_pool"] = fd_max_rel_err(
        lambda: p11(ad.global_avg_pool(g1)), [g1], n_coords, rng=rng)

    s1 = Tensor(rng.uniform(-1, 1, (1, 8, 3, 3)), requires_grad=True)
    p12 = _projector((1, 2, 6, 6), rng)
    results["pixel_shuffle"] = fd_max_rel_err(
        lambda: p12(ad.pixel_shuffle(s1, 2)), [s1], n_coords, rng=rng)

    t1 = Tensor(rng.uniform(0.5, 1.5, (3, 6)), requires_grad=True)
    target = Tensor(rng.uniform(-1.5, -0.5, (3, 6)))
    results["l1_loss"] = fd_max_rel_err(
        lambda: ad.l1_loss(t1, target), [t1], n_coords, rng=rng)

    n1 = Tensor(rng.uniform(-1, 1, (4, 6)), requires_grad=True)
    p13 = _projector((2, 6), rng)
    results["narrow"] = fd_max_rel_err(
        lambda: p13(ad.narrow(n1, 0, 1, 2)), [n1], n_coords, rng=rng)

    ts = Tensor(rng.uniform(-1, 1, (2, 3, 1, 1)), requires_grad=True)
    p14 = _projector((2, 3, 4, 5), rng)
    results["tile_spatial"] = fd_max_rel_err(
        lambda: p14(ad.tile_spatial(ts, 4, 5)), [ts], n_coords, rng=rng)

    cs_x = Tensor(rng.uniform(-1, 1, (2, 3, 4, 5)), requires_grad=True)
    cs_g = Tensor(rng.uniform(0.2, 0.8, (2, 3, 1, 1)), requires_grad=True)
    p15 = _projector((2, 3, 4, 5), rng)
    results["channel_scale"] = fd_max_rel_err(
        lambda: p15(ad.channel_scale(cs_x, cs_g)), [cs_x, cs_g],
        n_coords, rng=rng)

    bm1 = Tensor(rng.uniform(-1, 1, (3, 2, 5)), requires_grad=True)
    bm2 = Tensor(rng.uniform(-1, 1, (3, 5, 4)), requires_grad=True)
    p16 = _projector((3, 2, 4), rng)
    results["bmm"] = fd_max_rel_err(
        lambda: p16(ad.bmm(bm1, bm2)), [bm1, bm2], n_coords, rng=rng)

    gr = Tensor(rng.uniform(-1, 1, (2, 3, 6)), requires_grad=True)
    p17 = _projector((2, 3, 3), rng)
    results["gram_rows"] = fd_max_rel_err(
        lambda: p17(ad.gram_rows(gr)), [gr], n_coords, rng=rng)

    return results


def _randomize_gates(params, rng):
    """Move every parameter off its structured initial value (zero gates,
    zero tails, pass-through fusions, delta heads) so all paths carry
    gradient signal."""
    for name, p in params.items():
        if name.endswith(".gate") or name == "integration.gate":
            p.data[...] = rng.uniform(0.2, 0.6, size=p.shape)
        else:
            p.data += rng.normal(0.0, 0.05, size=p.shape)


def check_residual_group(seed=0, n_coords=20):
    rng = np.random.default_rng(seed)
    cfg = model.MINetConfig(L=1, C=4, B=2, reduction=4).validate()
    params = {}
    for name, shape, fan_in in model._group_specs("g", cfg):
        sigma = 0.3 if fan_in else 0.1
        params[name] = Tensor(rng.normal(0.0, sigma, size=shape),
                              requires_grad=True)
    x = Tensor(rng.uniform(-1, 1, (1, 4, 6, 6)), requires_grad=True)
    p = _projector((1, 4, 6, 6), rng)
    tensors = [x] + list(params.values())
    return fd_max_rel_err(
        lambda: p(model.residual_group(x, params, "g", cfg.B)),
        tensors, n_coords, rng=rng)


def check_integration(seed=0, n_coords=20):
    rng = np.random.default_rng(seed)
    m_stages, c, h, w = 4, 3, 4, 4
    stages = [Tensor(rng.uniform(-1, 1, (2, c, h, w)), requires_grad=True)
              for _ in range(m_stages)]
    params = {
        "integration.gate": Tensor(np.array([0.45]), requires_grad=True),
        "integration.reduce.w": Tensor(
            rng.normal(0.0, 0.2, (c, m_stages * c, 1, 1)), requires_grad=True),
        "integration.reduce.b": Tensor(rng.normal(0.0, 0.1, c),
                                       requires_grad=True),
    }
    cfg = model.MINetConfig(L=2, C=c, reduction=1).validate()
    p = _projector((2, c, h, w), rng)
    tensors = stages + list(params.values())
    return fd_max_rel_err(
        lambda: p(model.multi_stage_integration(stages, params, cfg)),
        tensors, n_coords, rng=rng)


def check_attention(seed=0, n_coords=20):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, (1, 4, 5, 5)), requires_grad=True)
    params = {
        "att.conv.w": Tensor(rng.normal(0.0, 0.3, (1, 1, 3, 3, 3)),
                             requires_grad=True),
        "att.conv.b": Tensor(rng.normal(0.0, 0.1, 1), requires_grad=True),
        "att.gate": Tensor(np.array([0.5]), requires_grad=True),
    }
    p = _projector((1, 4, 5, 5), rng)
    tensors = [x] + list(params.values())
    return fd_max_rel_err(
        lambda: p(model.channel_spatial_attention(x, params, "att")),
        tensors, n_coords, rng=rng)


def check_full_model(seed=0, n_coords=20, variant="full"):
    """FD spot check of the loss gradient w.r.t. every parameter tensor of
    a small end-to-end model (16x16 output)."""
    rng = np.random.default_rng(seed)
    cfg = model.MINetConfig(L=3, C=8, B=2, r=2, reduction=4,
                            variant=variant).validate()
    params = model.init_params(cfg, seed)
    _randomize_gates(params, rng)
    n = 8
    x_t1 = Tensor(rng.uniform(0.0, 1.0, (1, 1, n * cfg.r, n * cfg.r)))
    y_t2 = Tensor(rng.uniform(0.0, 1.0, (1, 1, n, n)))
    gt_t2 = Tensor(rng.uniform(2.0, 3.0, (1, 1, n * cfg.r, n * cfg.r)))
    gt_t1 = Tensor(rng.uniform(-3.0, -2.0, (1, 1, n * cfg.r, n * cfg.r)))

    def build():
        out = model.minet_forward(params, cfg, x_t1, y_t2)
        return model.minet_loss(out, gt_t2, gt_t1, cfg.alpha, cfg.beta)

    return fd_max_rel_err(build, list(params.values()), n_coords, rng=rng)


_COMPOSITE_CHECKS = {
    "residual_group": (check_residual_group, OP_TOL),
    "multi_stage_integration": (check_integration, OP_TOL),
    "channel_spatial_attention": (check_attention, OP_TOL),
    "full_model": (check_full_model, FULL_MODEL_TOL),
}


def run_suite(seed=0, n_coords=20, only=None):
    """All gradient checks; returns an ordered dict name -> (err, tol).

    `only` restricts the run to a single named check; an unknown name
    raises KeyError whose message lists the available checks.
    """
    if only is not None and only in _COMPOSITE_CHECKS:
        fn, tol = _COMPOSITE_CHECKS[only]
        return {only: (fn(seed, n_coords), tol)}
    results = {}
    for name, err in check_ops(seed, n_coords).items():
        results[name] = (err, OP_TOL)
    if only is not None:
        if only not in results:
            raise KeyError("unknown check %r; available: %s" % (
                only, ", ".join(list(results) + list(_COMPOSITE_CHECKS))))
        return {only: results[only]}
    for name, (fn, tol) in _COMPOSITE_CHECKS.items():
        results[name] = (fn(seed, n_coords), tol)
    return results
