"""Dice/IoU metrics, evaluation reports, ablation matrices, and overlays."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import DataError, normalize_angles, normalize_phase, select_angles
from .model import build_model
from .tensor import Tensor


def _as_binary(mask, name):
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise DataError(f"{name} mask must be binary")
    return m.astype(bool)


def dice(pred, gt):
    """2|P∩G| / (|P|+|G|); both-empty pairs score 1.0."""
    p, g = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise DataError(f"mask shapes differ: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def iou(pred, gt):
    """|P∩G| / |P∪G|; both-empty pairs score 1.0."""
    p, g = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise DataError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def predict_mask(model, sample, stats):
    """Argmax of the full-resolution logits; ties break toward background."""
    angles = normalize_angles(sample.angles, stats)
    phase = normalize_phase(sample.phase, stats)
    angles = select_angles(angles, model.cfg.angle_channel_mask)
    np_dtype = np.float32 if model.dtype == "f32" else np.float64
    a = Tensor(angles.data[None].astype(np_dtype))
    p = Tensor(phase.data[None].astype(np_dtype))
    logits = model.forward(a, p).full_res.data[0]
    # np.argmax keeps the first maximum, i.e. class 0 (background) on ties
    return np.argmax(logits, axis=0).astype(np.uint8)


@dataclass
class EvalReport:
    per_sample: list  # (id, dice, iou)
    mean_dice: float
    std_dice: float
    mean_iou: float
    std_iou: float

    @classmethod
    def from_pairs(cls, per_sample):
        if not per_sample:
            raise DataError("cannot build a report from zero samples")
        d = np.array([r[1] for r in per_sample], dtype=np.float64)
        i = np.array([r[2] for r in per_sample], dtype=np.float64)
        return cls(per_sample=list(per_sample),
                   mean_dice=float(d.mean()), std_dice=float(d.std()),
                   mean_iou=float(i.mean()), std_iou=float(i.std()))

    def to_csv(self, path):
        lines = ["id,dice,iou"]
        for sid, d, i in self.per_sample:
            lines.append(f"{sid},{d!r},{i!r}")
        lines.append(f"AGGREGATE,{self.mean_dice!r},{self.mean_iou!r}")
        Path(path).write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def from_csv(cls, path):
        lines = Path(path).read_text().strip().splitlines()
        if lines[0] != "id,dice,iou":
            raise DataError(f"{path}: unexpected header {lines[0]!r}")
        pairs = []
        for line in lines[1:]:
            sid, d, i = line.split(",")
            if sid == "AGGREGATE":
                continue
            pairs.append((sid, float(d), float(i)))
        return cls.from_pairs(pairs)


def evaluate(model, test_samples, stats):
    pairs = []
    for s in test_samples:
        pred = predict_mask(model, s, stats)
        pairs.append((s.id, dice(pred, s.mask), iou(pred, s.mask)))
    return EvalReport.from_pairs(pairs)


# ---------------------------------------------------------------------------
# overlays (binary PPM, P6)

TP_COLOR = (255, 255, 0)   # prediction and ground truth agree on cell
FN_COLOR = (0, 255, 0)     # ground-truth-only (missed) regions
FP_COLOR = (255, 0, 0)     # predicted regions unsupported by ground truth


def overlay(pred, gt, phase):
    """RGB (H, W, 3) u8: phase rendered grayscale under TP/FN/FP coloring."""
    p, g = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    ph = phase.data if isinstance(phase, Tensor) else np.asarray(phase)
    ph = ph.reshape(p.shape).astype(np.float64)
    lo, hi = ph.min(), ph.max()
    gray = np.zeros_like(ph) if hi == lo else (ph - lo) / (hi - lo)
    img = np.repeat((gray * 255).astype(np.uint8)[:, :, None], 3, axis=2)
    img[p & g] = TP_COLOR
    img[~p & g] = FN_COLOR
    img[p & ~g] = FP_COLOR
    return img


def write_ppm(path, img):
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DataError(f"PPM wants (H, W, 3) u8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())
    return path


def read_ppm(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise DataError(f"{path}: not a binary PPM")
    parts = raw.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def write_overlay(directory, sample, pred):
    """overlay_<id>.ppm plus a sidecar text line with the panel's Dice/IoU."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img = overlay(pred, sample.mask, sample.phase)
    write_ppm(directory / f"overlay_{sample.id}.ppm", img)
    d, i = dice(pred, sample.mask), iou(pred, sample.mask)
    (directory / f"overlay_{sample.id}.txt").write_text(f"dice={d:.6f} iou={i:.6f}\n")
    return img


# ---------------------------------------------------------------------------
# ablation matrices


@dataclass
class AblationMatrix:
    rows: list               # (variant name, EvalReport)
    train_config_hash: str   # identical settings across every row

    def to_csv(self, path):
        lines = ["variant,mean_dice,std_dice,mean_iou,std_iou"]
        for name, rep in self.rows:
            lines.append(f"{name},{rep.mean_dice!r},{rep.std_dice!r},{rep.mean_iou!r},{rep.std_iou!r}")
        Path(path).write_text("\n".join(lines) + "\n")
        return path


def train_config_hash(train_cfg):
    text = "\n".join(f"{k}={v}" for k, v in train_cfg.to_kv().items())
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _run_one_variant(name, cfg, train_samples, test_samples, train_cfg, out_dir):
    from .train import train  # deferred: train imports evaluate for the dice metric

    model = build_model(cfg, dtype=train_cfg.dtype)
    run_dir = Path(out_dir) / name if out_dir is not None else None
    stats, _ = train(model, train_samples, train_cfg, out_dir=run_dir)
    report = evaluate(model, test_samples, stats)
    if run_dir is not None:
        report.to_csv(run_dir / "eval.csv")
    return name, report


def _run_variants(variants, train_samples, test_samples, train_cfg, out_dir=None, log=None,
                  jobs=1):
    # each row owns its model, tape, and rng streams, so rows may run in parallel
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_one_variant, name, cfg, train_samples, test_samples,
                                   train_cfg, out_dir) for name, cfg in variants]
            rows = [f.result() for f in futures]
    else:
        rows = [_run_one_variant(name, cfg, train_samples, test_samples, train_cfg, out_dir)
                for name, cfg in variants]
    if log is not None:
        for name, report in rows:
            log(f"{name}: dice {report.mean_dice:.4f} +/- {report.std_dice:.4f}  "
                f"iou {report.mean_iou:.4f} +/- {report.std_iou:.4f}")
    return AblationMatrix(rows=rows, train_config_hash=train_config_hash(train_cfg))


def model_matrix_variants(base):
    """The in-scope model comparison: ours vs early fusion vs single-modality."""
    return [
        ("dm_qpmnet", replace(base, fusion_op="mha")),
        ("early_fusion_5ch", replace(base, fusion_op="early_fusion")),
        ("angles_only", replace(base, fusion_op="angles_only")),
        ("phase_only", replace(base, fusion_op="phase_only")),
    ]


def fusion_matrix_variants(base):
    """Fusion operator / depth ablation: six variants."""
    return [
        ("mha_stage2", replace(base, fusion_op="mha", fusion_stage=2)),
        ("concat1x1_stage2", replace(base, fusion_op="concat1x1", fusion_stage=2)),
        ("crossgate_stage2", replace(base, fusion_op="crossgate", fusion_stage=2)),
        ("early_fusion", replace(base, fusion_op="early_fusion")),
        ("mha_stage3", replace(base, fusion_op="mha", fusion_stage=3)),
        ("mha_stage1", replace(base, fusion_op="mha", fusion_stage=1)),
    ]


def leave_one_out_variants(base):
    """Four retrainings, each with one angle channel disabled."""
    rows = []
    for k, deg in enumerate((0, 45, 90, 135)):
        mask = tuple(i != k for i in range(4))
        rows.append((f"drop_{deg}deg", replace(base, angle_channel_mask=mask)))
    return rows


def run_model_matrix(train_samples, test_samples, base_cfg, train_cfg, out_dir=None, log=None,
                     jobs=1):
    return _run_variants(model_matrix_variants(base_cfg), train_samples, test_samples,
                         train_cfg, out_dir, log, jobs)


def run_fusion_matrix(train_samples, test_samples, base_cfg, train_cfg, out_dir=None, log=None,
                      jobs=1):
    return _run_variants(fusion_matrix_variants(base_cfg), train_samples, test_samples,
                         train_cfg, out_dir, log, jobs)


def run_leave_one_out(train_samples, test_samples, base_cfg, train_cfg, out_dir=None, log=None,
                      jobs=1):
    return _run_variants(leave_one_out_variants(base_cfg), train_samples, test_samples,
                         train_cfg, out_dir, log, jobs)


def write_loo_plot_data(matrix, path):
    """Line-plot data for the leave-one-out sweep: dropped angle vs mean Dice/IoU."""
    lines = ["dropped_angle_deg,mean_dice,mean_iou"]
    for name, rep in matrix.rows:
        deg = name.removeprefix("drop_").removesuffix("deg")
        lines.append(f"{deg},{rep.mean_dice!r},{rep.mean_iou!r}")
    Path(path).write_text("\n".join(lines) + "\n")
    return path
