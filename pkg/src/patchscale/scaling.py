"""Experiment layer: patch-size sweeps, power-law fits and the three comparison studies."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr
from threadpoolctl import threadpool_limits

from .cost_model import estimate, fixed_length_input_scan
from .data import Dataset
from .model import EncoderConfig, SegHeadConfig, build_encoder, build_segmenter
from .train import Recipe, evaluate, train_run
from .validation import ConfigError, check_patch_divides

INSUFFICIENT = "insufficient points"


@dataclass(frozen=True)
class RunRecord:
    patch: int
    seq_len: int
    test_loss: float
    top1: float
    miou: float | None
    flops_per_image: int
    seed: int
    config_hash: str
    recipe_hash: str = ""
    arm: str = "patch"
    image_size: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PowerLawFit:
    log_a: float
    b: float
    r2: float
    n: int

    def predict(self, p) -> np.ndarray:
        return np.exp(self.log_a) * np.asarray(p, dtype=np.float64) ** self.b


@dataclass
class ScalingCurve:
    records: list                 # one RunRecord per p (seed means), p descending
    runs: list = field(default_factory=list)   # every (p, seed) record
    fit: PowerLawFit | None = None
    spearman: float | None = None
    status: str = "ok"
    recipe_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "recipe_hash": self.recipe_hash,
            "fit": asdict(self.fit) if self.fit else None,
            "spearman": self.spearman,
            "records": [r.to_dict() for r in self.records],
            "runs": [r.to_dict() for r in self.runs],
        }


# ---------------------------------------------------------------- fitting

def fit_power_law(records) -> PowerLawFit:
    """OLS of ln(loss) on ln(p).  ``records``: RunRecords or (p, loss) pairs.

    r2 is 1 when the target has zero variance and the residuals vanish.
    """
    pairs = [(r.patch, r.test_loss) if isinstance(r, RunRecord) else tuple(r) for r in records]
    if len(pairs) < 3:
        raise ValueError(f"{INSUFFICIENT}: a fit needs >= 3 records, got {len(pairs)}")
    p = np.array([a for a, _ in pairs], dtype=np.float64)
    loss = np.array([b for _, b in pairs], dtype=np.float64)
    if np.any(loss <= 0) or not np.all(np.isfinite(loss)):
        raise ValueError(f"losses must be positive and finite, got {loss.tolist()}")
    if np.any(p <= 0):
        raise ValueError(f"patch sizes must be positive, got {p.tolist()}")
    x, y = np.log(p), np.log(loss)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0:
        raise ValueError(f"{INSUFFICIENT}: all records share one patch size")
    b = float(xc @ (y - y.mean())) / sxx
    log_a = float(y.mean() - b * x.mean())
    resid = y - (log_a + b * x)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        r2 = 1.0 if ss_res <= 1e-30 else 0.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return PowerLawFit(log_a, b, r2, len(pairs))


def _spearman(p, loss) -> float:
    if len(p) < 2 or np.ptp(loss) == 0:
        return float("nan")
    return float(spearmanr(p, loss).statistic)


def assemble_curve(runs: list[RunRecord]) -> ScalingCurve:
    """Average seeds per p (arithmetic mean), sort by p descending, fit when >= 3 distinct p."""
    if not runs:
        raise ValueError("no runs to assemble")
    hashes = {r.recipe_hash for r in runs}
    if len(hashes) != 1:
        raise AssertionError(f"runs in one sweep must share a recipe, found hashes {sorted(hashes)}")
    runs = sorted(runs, key=lambda r: (-r.patch, r.seed))
    means = []
    for p in sorted({r.patch for r in runs}, reverse=True):
        rs = [r for r in runs if r.patch == p]
        mi = [r.miou for r in rs if r.miou is not None]
        means.append(replace(rs[0], test_loss=float(np.mean([r.test_loss for r in rs])),
                             top1=float(np.mean([r.top1 for r in rs])),
                             miou=float(np.mean(mi)) if mi else None, seed=-1))
    curve = ScalingCurve(means, runs, recipe_hash=hashes.pop())
    if len(means) >= 3:
        curve.fit = fit_power_law(means)
        curve.spearman = _spearman([r.patch for r in means], [r.test_loss for r in means])
    else:
        curve.status = INSUFFICIENT
    return curve


# ---------------------------------------------------------------- single runs

@dataclass(frozen=True)
class Job:
    cfg: EncoderConfig
    recipe: Recipe
    seed: int
    arm: str = "patch"
    head: SegHeadConfig | None = None
    dtype: str = "float32"


def _run_job(job: Job, train: Dataset, test: Dataset, log_path=None) -> RunRecord:
    if job.head is None:
        model = build_encoder(job.cfg, seed=job.seed, dtype=np.dtype(job.dtype))
    else:
        model = build_segmenter(job.cfg, job.head, seed=job.seed, dtype=np.dtype(job.dtype))
    train_run(model, train, job.recipe, log_path=log_path, record_wall_time=False,
              config_hash=job.cfg.config_hash, seed=job.seed)
    rep = evaluate(model, test)
    est = estimate(job.cfg)
    return RunRecord(job.cfg.patch, job.cfg.seq_len, rep.test_loss, rep.top1, rep.miou,
                     est.flops_per_image, job.seed, job.cfg.config_hash, job.recipe.recipe_hash,
                     job.arm, job.cfg.image_size)


def _init_worker():
    threadpool_limits(1)


def _worker(args):
    job, train, test, log_path = args
    return _run_job(job, train, test, log_path)


def run_jobs(jobs: list[Job], data, n_jobs: int = 1, log_dir=None) -> list[RunRecord]:
    """Run jobs serially or across processes; output order follows ``jobs`` either way.

    ``data`` maps a job to its (train, test) pair, or is one pair for all jobs.
    """
    pick = data if callable(data) else (lambda _job: data)
    args = []
    for j in jobs:
        tr, te = pick(j)
        log = None
        if log_dir is not None:
            tag = j.head.kind if j.head else j.arm
            log = f"{log_dir}/run_{j.cfg.config_hash}_{tag}_s{j.seed}.jsonl"
        args.append((j, tr, te, log))
    if n_jobs <= 1:
        return [_worker(a) for a in args]
    with ProcessPoolExecutor(max_workers=n_jobs, initializer=_init_worker) as ex:
        return list(ex.map(_worker, args))


def _check_grid(cfg: EncoderConfig, grid) -> list[int]:
    grid = [int(p) for p in grid]
    if not grid:
        raise ConfigError("empty patch grid")
    for p in grid:
        check_patch_divides(cfg.image_size, cfg.image_size, p)
    return grid


def _recipe_for_sweep(recipe: Recipe) -> Recipe:
    if not isinstance(recipe, Recipe):
        raise TypeError("recipe must be a Recipe")
    return recipe


# ---------------------------------------------------------------- sweeps

def run_patch_scan(base_cfg: EncoderConfig, patch_grid, recipe: Recipe, dataset, seeds=(0,),
                   n_jobs: int = 1, log_dir=None, dtype="float32") -> ScalingCurve:
    """One model per (p, seed), one recipe for all; every p is validated before training starts."""
    grid = _check_grid(base_cfg, patch_grid)
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    recipe = _recipe_for_sweep(recipe)
    jobs = [Job(base_cfg.with_patch(p), recipe, s, dtype=dtype) for p in grid for s in seeds]
    curve = assemble_curve(run_jobs(jobs, dataset, n_jobs, log_dir))
    assert len({r.recipe_hash for r in curve.runs}) == 1
    return curve


def ablate_sequence_extension(base_cfg: EncoderConfig, p_large: int, factors, recipe: Recipe, dataset,
                              seeds=(0,), n_jobs: int = 1, log_dir=None, dtype="float32") -> dict:
    """Matched-L comparison of token interpolation ("extend") against smaller patches ("scale")."""
    factors = [int(f) for f in factors]
    base = base_cfg.with_patch(p_large)
    pairs = {}
    for f in factors:
        if f < 1 or p_large % f:
            raise ConfigError(f"factor {f} does not divide p_large={p_large}")
        ext = base_cfg.with_patch(p_large, extend=f)
        sca = base_cfg.with_patch(p_large // f)
        if ext.seq_len != sca.seq_len:
            raise ConfigError(f"factor {f}: extended L={ext.seq_len} != scaled L={sca.seq_len}")
        pairs[f] = (ext, sca)
    jobs = [Job(base, recipe, s, "baseline", dtype=dtype) for s in seeds]
    for f in factors:
        if f == 1:
            continue
        ext, sca = pairs[f]
        jobs += [Job(ext, recipe, s, f"extend_x{f}", dtype=dtype) for s in seeds]
        jobs += [Job(sca, recipe, s, f"scale_x{f}", dtype=dtype) for s in seeds]
    recs = run_jobs(jobs, dataset, n_jobs, log_dir)

    def mean_of(arm, key):
        return float(np.mean([getattr(r, key) for r in recs if r.arm == arm]))

    b_top1, b_loss = mean_of("baseline", "top1"), mean_of("baseline", "test_loss")
    rows = []
    for f in factors:
        ext, sca = pairs[f]
        e_arm, s_arm = ("baseline", "baseline") if f == 1 else (f"extend_x{f}", f"scale_x{f}")
        row = {"factor": f, "seq_len": ext.seq_len,
               "extend_top1": mean_of(e_arm, "top1"), "scale_top1": mean_of(s_arm, "top1"),
               "extend_loss": mean_of(e_arm, "test_loss"), "scale_loss": mean_of(s_arm, "test_loss")}
        row["extend_gain"] = row["extend_top1"] - b_top1
        row["scale_gain"] = row["scale_top1"] - b_top1
        rows.append(row)
    return {"experiment": "sequence_extension", "interp": "bilinear, align corners", "p_large": p_large, "baseline_top1": b_top1,
            "baseline_loss": b_loss, "recipe_hash": recipe.recipe_hash, "rows": rows,
            "runs": [r.to_dict() for r in recs]}


def ablate_input_size(base_cfg: EncoderConfig, scales, recipe: Recipe, dataset, seeds=(0,),
                      n_jobs: int = 1, log_dir=None, dtype="float32") -> dict:
    """Upsample inputs by each scale and grow p with it, so L never changes."""
    scales = [int(s) for s in scales]
    if any(s < 1 for s in scales):
        raise ConfigError(f"scales must be >= 1, got {scales}")
    train, test = dataset
    native = train.native_resolution
    if train.image_size != base_cfg.image_size:
        raise ConfigError(f"dataset is {train.image_size}px but the config expects {base_cfg.image_size}px")
    ests = fixed_length_input_scan(base_cfg, scales)
    cfgs = {s: base_cfg.with_patch(base_cfg.patch * s, base_cfg.image_size * s) for s in scales}
    if len({c.seq_len for c in cfgs.values()}) != 1:
        raise ConfigError("sequence length changed across scales")
    resized = {s: (train.resized(base_cfg.image_size * s), test.resized(base_cfg.image_size * s))
               for s in scales}
    for s, (tr, te) in resized.items():
        te.normalization = None
        te.with_normalization_from(tr)
    jobs = [Job(cfgs[s], recipe, seed, f"input_x{s}", dtype=dtype) for s in scales for seed in seeds]
    recs = run_jobs(jobs, lambda j: resized[int(j.arm.split("x")[1])], n_jobs, log_dir)
    base_pp = ests[0].patchify_params
    rows = []
    for s, e in zip(scales, ests):
        rs = [r for r in recs if r.arm == f"input_x{s}"]
        rows.append({"scale": s, "image_size": base_cfg.image_size * s, "patch": base_cfg.patch * s,
                     "seq_len": e.seq_len, "top1": float(np.mean([r.top1 for r in rs])),
                     "test_loss": float(np.mean([r.test_loss for r in rs])),
                     "patchify_params": e.patchify_params,
                     "patchify_ratio": e.patchify_params / base_pp,
                     "beyond_native": base_cfg.image_size * s > native})
    return {"experiment": "input_size", "native_resolution": native, "recipe_hash": recipe.recipe_hash,
            "rows": rows, "runs": [r.to_dict() for r in recs]}


def decoder_gap_scan(base_cfg: EncoderConfig, patch_grid, recipe: Recipe, seg_dataset, seeds=(0,),
                     decoder: SegHeadConfig | None = None, n_jobs: int = 1, log_dir=None, dtype="float32") -> dict:
    """gap(p) = mIoU(conv decoder proxy) - mIoU(linear head), same backbone init per seed."""
    grid = _check_grid(base_cfg, patch_grid)
    train, _ = seg_dataset
    if train.masks is None:
        raise ConfigError("decoder gap needs a segmentation dataset with masks")
    K = train.num_classes
    decoder = decoder or SegHeadConfig("conv_decoder_proxy", K)
    linear = SegHeadConfig("linear", K)
    jobs = []
    for p in grid:
        cfg = base_cfg.with_patch(p)
        for s in seeds:
            jobs.append(Job(cfg, recipe, s, "linear", linear, dtype))
            jobs.append(Job(cfg, recipe, s, "decoder", decoder, dtype))
    recs = run_jobs(jobs, seg_dataset, n_jobs, log_dir)
    rows = []
    for p in grid:
        lin = [r.miou for r in recs if r.patch == p and r.arm == "linear"]
        dec = [r.miou for r in recs if r.patch == p and r.arm == "decoder"]
        gaps = [d - l for d, l in zip(dec, lin)]
        rows.append({"patch": p, "miou_linear": float(np.mean(lin)), "miou_decoder": float(np.mean(dec)),
                     "gap": float(np.mean(gaps)), "gap_per_seed": gaps})
    return {"experiment": "decoder_gap", "recipe_hash": recipe.recipe_hash,
            "decoder": asdict(decoder), "rows": rows, "runs": [r.to_dict() for r in recs]}


# ---------------------------------------------------------------- reports

CSV_COLUMNS = ("patch", "seq_len", "test_loss", "top1", "miou", "flops")


def _num(v):
    if v is None:
        return None
    if isinstance(v, float):
        return float(f"{v:.17g}") if math.isfinite(v) else None
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return _num(obj.item())
    return _num(obj)


def report_json(obj) -> str:
    if isinstance(obj, ScalingCurve):
        obj = obj.to_dict()
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def curve_csv(curve: ScalingCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in curve.records:
        w.writerow([r.patch, r.seq_len, repr(float(r.test_loss)), repr(float(r.top1)),
                    "" if r.miou is None else repr(float(r.miou)), r.flops_per_image])
    return buf.getvalue()


def read_curve_csv(text: str) -> list[RunRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("no rows in CSV")
    missing = set(CSV_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"CSV is missing columns {sorted(missing)}")
    out = []
    for i, row in enumerate(rows, start=2):
        try:
            out.append(RunRecord(int(row["patch"]), int(row["seq_len"]), float(row["test_loss"]),
                                 float(row["top1"]), float(row["miou"]) if row["miou"] else None,
                                 int(float(row["flops"])) if row["flops"] else 0, -1, ""))
        except ValueError as e:
            raise ValueError(f"CSV line {i}: {e}") from None
    return out


def curve_text(curve: ScalingCurve, title: str = "patch scan") -> str:
    lines = [title, f"{'p':>4} {'L':>6} {'test_loss':>10} {'top1':>7} {'miou':>7} {'GFLOPs':>9}"]
    for r in curve.records:
        mi = f"{r.miou:7.4f}" if r.miou is not None else f"{'-':>7}"
        lines.append(f"{r.patch:>4} {r.seq_len:>6} {r.test_loss:>10.4f} {r.top1:>7.4f} {mi} "
                     f"{r.flops_per_image / 1e9:>9.4f}")
    if curve.fit:
        f = curve.fit
        lines.append(f"fit: loss = {math.exp(f.log_a):.4g} * p^{f.b:.4f}   r2 = {f.r2:.4f}   "
                     f"spearman(p, loss) = {curve.spearman:+.3f}")
        lines.append("note: pure power law without an additive floor; few points cannot pin one down")
    else:
        lines.append(f"fit: {curve.status}")
    return "\n".join(lines) + "\n"


def table_text(report: dict) -> str:
    rows = report["rows"]
    if not rows:
        return report["experiment"] + ": no rows\n"
    keys = [k for k in rows[0] if not isinstance(rows[0][k], list)]
    width = {k: max(len(k), *(len(_cell(r[k])) for r in rows)) for k in keys}
    lines = [report["experiment"], "  ".join(k.rjust(width[k]) for k in keys)]
    for r in rows:
        lines.append("  ".join(_cell(r[k]).rjust(width[k]) for k in keys))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
