"""Adam training loop, evaluation, and the ablation harness."""

import ctypes
import hashlib
import os
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from . import data, metrics, model, serialization
from .autodiff import Tensor


@dataclass
class TrainConfig:
    """Everything a run needs; hashes of this name the run directory."""

    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    r: int = 2
    variant: str = "full"
    dataset_root: str = "data"
    L: int = 3
    C: int = 16
    B: int = 2
    reduction: int = 4
    alpha: float = 0.3
    beta: float = 0.7

    def model_config(self):
        return model.MINetConfig(L=self.L, C=self.C, B=self.B, r=self.r,
                                 reduction=self.reduction, alpha=self.alpha,
                                 beta=self.beta, variant=self.variant).validate()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        return cls(**known)

    def run_hash(self):
        text = "\n".join("%s=%s" % (k, v) for k, v in sorted(self.to_dict().items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params, state):
    """Bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise RuntimeError("adam_step: missing gradient for %r" % name)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


_ALLOCATOR_TUNED = False


def _tune_allocator():
    """Pin glibc's mmap threshold at 64 MB so large temporaries are reused.

    Each step allocates many short-lived multi-megabyte arrays; with the
    default dynamic threshold glibc returns them to the kernel on free and
    every reuse pays minor-fault and zeroing costs (~15% of a step).
    Best-effort and Linux-only; a missing libc just skips the tweak.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        m_mmap_threshold = ctypes.c_int(-3)
        libc.mallopt(m_mmap_threshold, ctypes.c_int(1 << 26))
    except (OSError, AttributeError):
        pass


# ---------------------------------------------------------------------------
# batching helpers


def batch_tensors(samples):
    """Stack sample pairs into (x_t1, y_t2, x_t2) batch tensors."""
    x_t1 = Tensor(np.stack([s.x_t1 for s in samples])[:, None])
    y_t2 = Tensor(np.stack([s.y_t2 for s in samples])[:, None])
    x_t2 = Tensor(np.stack([s.x_t2 for s in samples])[:, None])
    return x_t1, y_t2, x_t2


def predict(params, cfg, samples, batch_size=8):
    """Super-resolved target images, clipped to [0, 1], graph-free."""
    _tune_allocator()
    preds = []
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            x_t1, y_t2, _ = batch_tensors(chunk)
            out = model.minet_forward(params, cfg, x_t1, y_t2)
            preds.extend(np.clip(out.sr_t2.data[:, 0], 0.0, 1.0))
    return preds


def evaluate(params, cfg, samples, batch_size=8):
    """Model and bicubic-baseline metrics over the same samples."""
    model_report = metrics.MetricsReport()
    bicubic_report = metrics.MetricsReport()
    preds = predict(params, cfg, samples, batch_size)
    for sample, pred in zip(samples, preds):
        model_report.add(pred, sample.x_t2)
        bicubic_report.add(data.bicubic_upsample(sample.y_t2, cfg.r), sample.x_t2)
    return model_report, bicubic_report


def evaluate_checkpoint(checkpoint_path, config, split="test"):
    """Load a checkpoint and score it on one dataset split."""
    cfg = config.model_config()
    arrays = serialization.load_checkpoint(checkpoint_path)
    expected = model.param_names(cfg)
    if list(arrays.keys()) != expected:
        raise serialization.FormatError(
            "checkpoint manifest does not match variant %r" % config.variant)
    params = model.arrays_to_params(arrays)
    samples = data.load_split(config.dataset_root, split)
    return evaluate(params, cfg, samples, config.batch_size)


# ---------------------------------------------------------------------------
# training


def _mean_val_psnr(params, cfg, samples, batch_size):
    preds = predict(params, cfg, samples, batch_size)
    values = [min(metrics.psnr(p, s.x_t2), metrics.PSNR_CAP_DB)
              for p, s in zip(preds, samples)]
    return float(np.mean(values))


def train(config, out_root=None, verbose=False):
    """Run one training job; returns (run_dir, history).

    Writes under <out_root>/<config hash>: config.txt, loss.csv
    (step,loss), best.mint (highest validation PSNR), metrics for the test
    split, and a manifest. Fully deterministic for a fixed config.
    """
    cfg = config.model_config()
    _tune_allocator()
    out_root = out_root or os.environ.get("MINET_RUN_ROOT", "runs")
    run_dir = os.path.join(out_root, config.run_hash())
    os.makedirs(run_dir, exist_ok=True)
    serialization.save_config(os.path.join(run_dir, "config.txt"),
                              config.to_dict())

    train_samples = data.load_split(config.dataset_root, "train")
    val_samples = data.load_split(config.dataset_root, "val")

    params = model.init_params(cfg, config.seed)
    state = AdamState(params, config.lr)
    shuffle_rng = np.random.default_rng(config.seed)

    t_start = time.time()
    loss_rows = []
    val_history = []
    best_psnr = -np.inf
    best_epoch = -1
    checkpoint_path = os.path.join(run_dir, "best.mint")
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_samples))
        for lo in range(0, len(order), config.batch_size):
            chunk = [train_samples[i] for i in order[lo:lo + config.batch_size]]
            x_t1, y_t2, x_t2 = batch_tensors(chunk)
            outputs = model.minet_forward(params, cfg, x_t1, y_t2)
            loss = model.minet_loss(outputs, x_t2, x_t1,
                                    config.alpha, config.beta)
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(
                    "non-finite loss %r at epoch %d step %d; aborting"
                    % (value, epoch, step))
            for p in params.values():
                p.grad = None
            loss.backward()
            adam_step(params, state)
            step += 1
            loss_rows.append((step, value))
        val_psnr = _mean_val_psnr(params, cfg, val_samples, config.batch_size)
        val_history.append((epoch, val_psnr))
        if val_psnr > best_psnr:
            best_psnr = val_psnr
            best_epoch = epoch
            serialization.save_checkpoint(checkpoint_path,
                                          model.params_to_arrays(params))
        if verbose:
            print("epoch %3d  loss %.6f  val psnr %.4f dB%s"
                  % (epoch, value, val_psnr,
                     "  *" if best_epoch == epoch else ""))
    duration = time.time() - t_start

    with open(os.path.join(run_dir, "loss.csv"), "w", encoding="utf-8") as f:
        f.write("step,loss\n")
        for s, v in loss_rows:
            f.write("%d,%.12g\n" % (s, v))
    with open(os.path.join(run_dir, "val.csv"), "w", encoding="utf-8") as f:
        f.write("epoch,val_psnr\n")
        for e, v in val_history:
            f.write("%d,%.12g\n" % (e, v))
    serialization.save_config(os.path.join(run_dir, "manifest.txt"), {
        "command": "train",
        "config": "config.txt",
        "seed": config.seed,
        "variant": config.variant,
        "checkpoint": "best.mint",
        "best_epoch": best_epoch,
        "best_val_psnr": "%.6f" % best_psnr,
        "duration_s": "%.3f" % duration,
        "version": 1,
    })
    history = {
        "loss": loss_rows,
        "val": val_history,
        "best_epoch": best_epoch,
        "best_val_psnr": best_psnr,
        "duration_s": duration,
        "checkpoint": checkpoint_path,
    }
    return run_dir, history


def write_metrics_files(run_dir, model_report, bicubic_report, sample_seeds):
    """Per-sample CSV plus an aligned side-by-side text table."""
    csv_path = os.path.join(run_dir, "metrics.csv")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("sample,model_nmse,model_psnr,model_ssim,"
                "bicubic_nmse,bicubic_psnr,bicubic_ssim\n")
        for i, seed in enumerate(sample_seeds):
            f.write("%d,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g\n" % (
                seed,
                model_report.nmse_values[i],
                min(model_report.psnr_values[i], metrics.PSNR_CAP_DB),
                model_report.ssim_values[i],
                bicubic_report.nmse_values[i],
                min(bicubic_report.psnr_values[i], metrics.PSNR_CAP_DB),
                bicubic_report.ssim_values[i]))
    txt_path = os.path.join(run_dir, "metrics.txt")
    with open(txt_path, "w", encoding="utf-8") as f:
        f.write(model_report.format_row("model") + "\n")
        f.write(bicubic_report.format_row("bicubic") + "\n")
    return csv_path, txt_path


def train_and_evaluate(config, out_root=None, verbose=False):
    """Train, score the test split with the best checkpoint, write metrics."""
    run_dir, history = train(config, out_root, verbose)
    model_report, bicubic_report = evaluate_checkpoint(
        history["checkpoint"], config, "test")
    test_samples = data.load_split(config.dataset_root, "test")
    write_metrics_files(run_dir, model_report, bicubic_report,
                        [s.seed for s in test_samples])
    history["model_report"] = model_report
    history["bicubic_report"] = bicubic_report
    return run_dir, history


# ---------------------------------------------------------------------------
# ablation


def run_ablation(base_config, out_root=None, variants=model.VARIANTS,
                 verbose=False):
    """Train every variant with shared seed/data and tabulate test metrics.

    Returns (rows, table_text) where rows maps variant -> per-metric
    (mean, std) summaries plus the run directory.
    """
    rows = {}
    for variant in variants:
        config = replace(base_config, variant=variant)
        run_dir, history = train_and_evaluate(config, out_root, verbose)
        summary = history["model_report"].summary()
        rows[variant] = {"summary": summary, "run_dir": run_dir,
                         "report": history["model_report"],
                         "bicubic": history["bicubic_report"]}
    lines = ["| variant | NMSE | PSNR (dB) | SSIM |",
             "|---|---|---|---|"]
    for variant in variants:
        s = rows[variant]["summary"]
        lines.append("| %s | %.5f +/- %.5f | %.4f +/- %.4f | %.5f +/- %.5f |"
                     % (variant, s["nmse"][0], s["nmse"][1],
                        s["psnr"][0], s["psnr"][1],
                        s["ssim"][0], s["ssim"][1]))
    table = "\n".join(lines) + "\n"
    if out_root:
        os.makedirs(out_root, exist_ok=True)
        with open(os.path.join(out_root, "ablation.md"), "w",
                  encoding="utf-8") as f:
            f.write(table)
        with open(os.path.join(out_root, "ablation.csv"), "w",
                  encoding="utf-8") as f:
            f.write("variant,nmse_mean,nmse_std,psnr_mean,psnr_std,"
                    "ssim_mean,ssim_std\n")
            for variant in variants:
                s = rows[variant]["summary"]
                f.write("%s,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g\n"
                        % (variant, s["nmse"][0], s["nmse"][1],
                           s["psnr"][0], s["psnr"][1],
                           s["ssim"][0], s["ssim"][1]))
    return rows, table


# ---------------------------------------------------------------------------
# figure export


def export_figures(run_dir, count=3):
    """Write PGM panels and error maps for the first test samples of a run.

    Reads the run's config.txt to locate the dataset and checkpoint.
    """
    config = TrainConfig.from_dict(
        serialization.load_config(os.path.join(run_dir, "config.txt")))
    cfg = config.model_config()
    arrays = serialization.load_checkpoint(os.path.join(run_dir, "best.mint"))
    params = model.arrays_to_params(arrays)
    samples = data.load_split(config.dataset_root, "test")[:count]
    preds = predict(params, cfg, samples, config.batch_size)
    fig_dir = os.path.join(run_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    written = []
    for sample, pred in zip(samples, preds):
        base = os.path.join(fig_dir, str(sample.seed))
        bicubic = data.bicubic_upsample(sample.y_t2, cfg.r)
        for tag, img in (("lr", sample.y_t2), ("gt", sample.x_t2),
                         ("guide", sample.x_t1), ("sr", pred),
                         ("bicubic", bicubic),
                         ("err_sr", metrics.error_map(pred, sample.x_t2)),
                         ("err_bicubic", metrics.error_map(bicubic, sample.x_t2))):
            path = "%s_%s.pgm" % (base, tag)
            serialization.write_pgm(path, img)
            written.append(path)
    return written
