"""Run orchestration behind the command line: datasets, training, sampling, evaluation, sweeps.

Every run directory ends with a ``manifest.json`` written last and
atomically. A manifest lists the hash of the run inputs and the hash of
each artifact, so a directory is reusable only when all of them still match.
"""

from __future__ import annotations

import copy
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .consistency import one_step_density
from .errors import ConfigError, DegenerateMapError
from .estimator import PosteriorEstimator, load_estimator
from .metrics import MetricReport, evaluate_instance, sbc_ece
from .sampling import sample_posterior, time_sampling
from .simulators import TrainingSet, generate_training_set, get_task, reference_posterior
from .training import TrainResult, build_model, train

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
WORKERS_ENV = "CMPE_WORKERS"


class RefusedError(ConfigError):
    """Output already exists and ``force`` was not given."""


def n_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1")
    return n


# ------------------------------------------------------------------ manifests


def file_hash(path: str | os.PathLike) -> str:
    return io.content_hash(Path(path).read_bytes())


def write_manifest(out_dir: Path, kind: str, config: dict, input_hash: str, artifacts: list[Path], timings: dict,
                   extra: dict | None = None) -> Path:
    manifest = {
        "schema_version": io.SCHEMA_VERSION,
        "kind": kind,
        "config": config,
        "input_hash": input_hash,
        "timings": timings,
        "artifacts": {p.name: {"path": p.name, "sha1": file_hash(p)} for p in artifacts},
    }
    if extra:
        manifest.update(extra)
    return io.write_json(out_dir / MANIFEST, manifest)


def valid_manifest(out_dir: Path, input_hash: str | None = None) -> dict | None:
    """The parsed manifest if it and every listed artifact are intact, else ``None``."""
    path = Path(out_dir) / MANIFEST
    try:
        manifest = io.read_json(path)
    except (OSError, ValueError):
        return None
    if manifest.get("schema_version") != io.SCHEMA_VERSION:
        return None
    if input_hash is not None and manifest.get("input_hash") != input_hash:
        return None
    for art in manifest.get("artifacts", {}).values():
        p = Path(out_dir) / art["path"]
        if not p.is_file() or file_hash(p) != art["sha1"]:
            return None
    return manifest


def prepare_out(out_dir: str | os.PathLike, force: bool, outputs: list[str]) -> Path:
    """Create ``out_dir``; refuse to overwrite existing outputs unless ``force``."""
    out = Path(out_dir)
    existing = [name for name in [MANIFEST, *outputs] if (out / name).exists()]
    if existing and not force:
        raise RefusedError(f"{out} already holds {', '.join(existing)}; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    if force:
        # invalidate first so a crash mid-run cannot leave a stale manifest pointing at new files
        (out / MANIFEST).unlink(missing_ok=True)
    return out


# -------------------------------------------------------------------- simulate


def run_simulate(task: str, budget: int, seed: int, out_dir, force: bool = False) -> tuple[Path, Path]:
    out = prepare_out(out_dir, force, ["dataset.csv", "dataset.json"])
    data = generate_training_set(task, budget, seed)
    csv_path, json_path = data.save(out)
    config = {"task": task, "budget": budget, "seed": seed}
    write_manifest(out, "simulate", config, io.content_hash(io.dumps_canonical(config)), [csv_path, json_path], {})
    return csv_path, json_path


# ----------------------------------------------------------------------- train


@dataclass
class TrainOutput:
    model: PosteriorEstimator
    result: TrainResult
    checkpoint: Path


def train_from_config(cfg: ExperimentConfig, data: TrainingSet | None = None) -> tuple[PosteriorEstimator, TrainResult]:
    if data is None:
        data = generate_training_set(cfg.task, cfg.budget, cfg.seed)
    if data.task != cfg.task or data.budget != cfg.budget:
        raise ConfigError(f"dataset ({data.task}, M={data.budget}) does not match the config")
    training = cfg.training_config()
    b = cfg.backbone
    model = build_model(
        cfg.model_kind, data, training, cfg.seed,
        hidden_widths=tuple(b["hidden_widths"]), activation=b["activation"],
        dropout_rate=b["dropout_rate"], l2_weight=b["l2_weight"],
        schedule=cfg.schedule if cfg.model_kind == "cmpe" else None,
    )
    result = train(model, data, training, cfg.seed)
    return model, result


def run_train(cfg: ExperimentConfig, out_dir, data_path=None, force: bool = False) -> TrainOutput:
    """Train to completion and write checkpoint, loss curve and manifest.

    Raises:
        RefusedError: a checkpoint already exists (resuming is not supported).
        TrainingDivergenceError: propagated with its diagnostics.
    """
    out = prepare_out(out_dir, force, ["checkpoint.json", "loss_curve.csv"])
    data = TrainingSet.load(data_path) if data_path is not None else None
    data_hash = file_hash(data_path) if data_path is not None else "generated"
    model, result = train_from_config(cfg, data)
    ckpt = model.save(out / "checkpoint.json")
    curve = io.write_csv(out / "loss_curve.csv", ["epoch", "loss"], [[i + 1, v] for i, v in enumerate(result.loss_curve)])
    write_manifest(
        out, "train", cfg.to_dict(), io.content_hash(cfg.content_hash() + data_hash), [ckpt, curve],
        {"train_s": result.train_s}, {"iterations": result.iterations},
    )
    return TrainOutput(model, result, ckpt)


# ---------------------------------------------------------------------- sample


def run_sample(checkpoint, x_obs: np.ndarray, k_steps: int, n_draws: int, seed: int, out_dir,
               force: bool = False) -> tuple[np.ndarray, float]:
    """Write ``draws_K{k}.csv`` and a manifest with the median per-1000-draw time.

    Single-step consistency draws also carry their log posterior density.
    """
    name = f"draws_K{k_steps}.csv"
    out = prepare_out(out_dir, force, [name])
    model = load_estimator(checkpoint)
    draws = sample_posterior(model, x_obs, k_steps, n_draws, seed)
    header = ["draw_index"] + [f"theta_{i}" for i in range(draws.shape[1])]
    columns = [draws]
    if model.model_kind == "cmpe" and k_steps == 1:
        try:
            density_draws, logp = one_step_density(model, x_obs, n_draws, seed)
        except DegenerateMapError as exc:
            log.warning("log_density omitted: %s", exc)
        else:
            draws = density_draws
            columns = [draws, logp[:, None]]
            header.append("log_density")
    values = np.hstack(columns)
    rows = [[i, *map(float, row)] for i, row in enumerate(values)]
    ms_per_1k = time_sampling(model, x_obs, k_steps, 1000, seed=seed)
    path = io.write_csv(out / name, header, rows)
    config = {"checkpoint_sha1": file_hash(checkpoint), "x_obs": np.ravel(x_obs).tolist(),
              "K_steps": k_steps, "n_draws": n_draws, "seed": seed}
    write_manifest(out, "sample", config, io.content_hash(io.dumps_canonical(config)), [path],
                   {"sample_ms_per_1k": {str(k_steps): ms_per_1k}, "ms_per_draw": ms_per_1k / 1000})
    return draws, ms_per_1k


# ------------------------------------------------------------------- reference


class ReferenceCache:
    """Reference draws on disk, one CSV per (task, observation, draw count).

    The sampling seed is derived from the key, so a cache hit and a cache
    miss return the same draws.
    """

    def __init__(self, root: str | os.PathLike | None):
        self.root = None if root is None else Path(root)

    def key(self, task: str, x_obs: np.ndarray, n_draws: int) -> str:
        return f"{task}_{io.array_hash(np.ravel(x_obs))}_{n_draws}"

    def get(self, task: str, x_obs: np.ndarray, n_draws: int) -> np.ndarray:
        key = self.key(task, x_obs, n_draws)
        path = None if self.root is None else self.root / f"{key}.csv"
        if path is not None and path.is_file():
            _, draws = io.read_matrix_csv(path)
            if draws.shape[0] == n_draws:
                return draws
        seed = int(io.content_hash(key)[:12], 16)
        draws = reference_posterior(task, x_obs, n_draws, seed)
        if path is not None:
            io.write_matrix_csv(path, [f"theta_{i}" for i in range(draws.shape[1])], draws)
        return draws


# -------------------------------------------------------------------- evaluate


def held_out_instances(task: str, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Held-out prior-predictive pairs, independent of every training set."""
    return get_task(task).sample_joint(np.random.default_rng([seed, 0x7E57]), n)


def _instance_job(args) -> list[dict]:
    model, task, j, x, theta_star, k_list, s_draws, seed, cache_root = args
    ref = ReferenceCache(cache_root).get(task, x, s_draws)
    rows = []
    for k in k_list:
        draws = sample_posterior(model, x, k, s_draws, [seed, j, k])
        rows.append({"instance": j, "K_steps": k, **evaluate_instance(draws, ref, theta_star, seed=seed + j)})
    return rows


def evaluate_model(model: PosteriorEstimator, cfg: ExperimentConfig, cache_root=None, workers: int = 1,
                   eval_seed: int | None = None) -> list[MetricReport]:
    """Metrics over ``J`` held-out instances for every ``K`` in the config.

    Per-instance seeds depend only on the instance index, so the result is
    the same for any worker count.
    """
    ev = cfg.eval
    seed = cfg.seed if eval_seed is None else eval_seed
    theta, xs = held_out_instances(cfg.task, ev["J"], seed)
    k_list = list(ev["K_steps_list"])
    jobs = [(model, cfg.task, j, xs[j], theta[j], k_list, ev["S_draws"], seed, cache_root) for j in range(ev["J"])]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = [r for chunk in pool.map(_instance_job, jobs) for r in chunk]
    else:
        rows = [r for job in jobs for r in _instance_job(job)]

    reports = []
    for k in k_list:
        per = [{key: r[key] for key in ("instance", "rmse", "mmd", "c2st")} for r in rows if r["K_steps"] == k]
        rep = MetricReport(cfg.task, cfg.model_kind, k, per, sampling_ms_per_1k=time_sampling(model, xs[0], k, seed=seed))
        if ev["n_sbc"] > 0:
            sbc = run_sbc(model, cfg.task, k, ev["n_sbc"], ev["sbc_draws"], seed)
            rep.ece_per_dim = sbc.ece.tolist()
            rep.sbc = sbc
        reports.append(rep)
    return reports


def run_sbc(model: PosteriorEstimator, task: str, k_steps: int, n_sbc: int, n_draws: int, seed: int):
    spec = get_task(task)

    def sampler(x, s, rng):
        return sample_posterior(model, x, k_steps, s, rng)

    return sbc_ece(sampler, spec.sample_joint, n_sbc, n_draws, np.random.default_rng([seed, 0x5BC, k_steps]))


def run_evaluate(cfg: ExperimentConfig, checkpoint, out_dir, cache_root=None, force: bool = False) -> list[MetricReport]:
    """Write per-instance CSV, aggregate JSON and plot-data CSVs for one checkpoint."""
    out = prepare_out(out_dir, force, ["per_instance.csv", "aggregate.json"])
    model = load_estimator(checkpoint)
    if model.task != cfg.task or model.model_kind != cfg.model_kind:
        raise ConfigError(f"checkpoint holds a {model.model_kind} model for {model.task}, config asks for "
                          f"{cfg.model_kind} on {cfg.task}")
    cache_root = out / "reference_cache" if cache_root is None else cache_root
    start = time.perf_counter()
    reports = evaluate_model(model, cfg, cache_root, n_workers())
    artifacts = write_reports(out, cfg, reports)
    input_hash = io.content_hash(cfg.content_hash() + file_hash(checkpoint))
    write_manifest(out, "evaluate", cfg.to_dict(), input_hash, artifacts,
                   {"evaluate_s": time.perf_counter() - start,
                    "sample_ms_per_1k": {str(r.k_steps): r.sampling_ms_per_1k for r in reports}},
                   {"warnings": sorted({w for r in reports for w in (r.sbc.warnings if r.sbc else [])})})
    return reports


PER_INSTANCE_HEADER = ["task", "model_kind", "M", "K_steps", "instance", "rmse", "mmd", "c2st"]
AGGREGATE_HEADER = ["task", "model_kind", "M", "K_steps", "c2st_mean", "c2st_se", "mmd_mean", "mmd_se",
                    "rmse_mean", "rmse_se", "max_ece", "sampling_ms_per_1k"]


def aggregate_row(cfg: ExperimentConfig, rep: MetricReport) -> list:
    agg = rep.aggregates()
    return [cfg.task, cfg.model_kind, cfg.budget, rep.k_steps,
            agg["c2st"]["mean"], agg["c2st"]["se"], agg["mmd"]["mean"], agg["mmd"]["se"],
            agg["rmse"]["mean"], agg["rmse"]["se"],
            "" if rep.max_ece is None else rep.max_ece, rep.sampling_ms_per_1k]


def write_reports(out: Path, cfg: ExperimentConfig, reports: list[MetricReport]) -> list[Path]:
    rows = [[cfg.task, cfg.model_kind, cfg.budget, rep.k_steps, r["instance"], r["rmse"], r["mmd"], r["c2st"]]
            for rep in reports for r in rep.per_instance]
    paths = [io.write_csv(out / "per_instance.csv", PER_INSTANCE_HEADER, rows)]
    paths.append(io.write_json(out / "aggregate.json", {
        "schema_version": io.SCHEMA_VERSION, "M": cfg.budget, "reports": [r.to_dict() for r in reports]}))
    paths.append(io.write_csv(out / "c2st_vs_k.csv", ["K_steps", "c2st_mean", "c2st_se"],
                              [[r.k_steps, r.aggregates()["c2st"]["mean"], r.aggregates()["c2st"]["se"]] for r in reports]))
    cal = [[r.k_steps, float(q), d, float(r.sbc.empirical_coverage[i, d])]
           for r in reports if r.sbc is not None
           for i, q in enumerate(r.sbc.quantiles) for d in range(r.sbc.empirical_coverage.shape[1])]
    if cal:
        paths.append(io.write_csv(out / "calibration.csv", ["K_steps", "nominal", "dim", "coverage"], cal))
    return paths


# ------------------------------------------------------------------- benchmark

SUITE_KEYS = ("tasks", "models", "budgets", "K_steps_list", "seed", "overrides")


@dataclass(frozen=True)
class Cell:
    task: str
    model_kind: str
    budget: int
    k_steps: int

    @property
    def train_dir(self) -> Path:
        return Path(self.task) / self.model_kind / f"M{self.budget}" / "train"

    @property
    def cell_dir(self) -> Path:
        return Path(self.task) / self.model_kind / f"M{self.budget}" / f"K{self.k_steps}"


def load_suite(raw: dict, seed: int | None = None) -> dict:
    unknown = sorted(set(raw) - set(SUITE_KEYS))
    if unknown:
        raise ConfigError(f"unknown key(s) in suite: {', '.join(unknown)}")
    for key in ("tasks", "models", "budgets", "K_steps_list"):
        if not isinstance(raw.get(key), list) or not raw[key]:
            raise ConfigError(f"suite key {key!r} must be a nonempty list")
    suite = copy.deepcopy(raw)
    suite["seed"] = seed if seed is not None else raw.get("seed")
    if suite["seed"] is None:
        raise ConfigError("a seed is mandatory (suite key 'seed' or --seed)")
    suite.setdefault("overrides", {})
    # validate every cell config up front so a typo fails before any training
    for task in suite["tasks"]:
        for kind in suite["models"]:
            for m in suite["budgets"]:
                cell_config(suite, task, kind, m)
    return suite


def plan_cells(suite: dict) -> list[Cell]:
    return [Cell(t, k, m, s) for t in suite["tasks"] for k in suite["models"]
            for m in suite["budgets"] for s in suite["K_steps_list"]]


def cell_config(suite: dict, task: str, kind: str, budget: int, k_steps: int | None = None) -> ExperimentConfig:
    over = copy.deepcopy(suite["overrides"].get(task, {}))
    if kind == "fmpe":
        over.pop("schedule", None)
    extra_keys = set(over) - {"backbone", "schedule", "training", "eval"}
    if extra_keys:
        raise ConfigError(f"overrides for {task} may only hold backbone/schedule/training/eval sections")
    over.setdefault("eval", {})["K_steps_list"] = [k_steps] if k_steps is not None else list(suite["K_steps_list"])
    return ExperimentConfig.from_dict({"task": task, "model_kind": kind, "budget": budget, **over}, suite["seed"])


def run_benchmark(suite: dict, out_dir, dry_run: bool = False, force: bool = False) -> list[Cell]:
    """Train every (task, model, M) once, then evaluate each K cell.

    Cells with an intact manifest are skipped, so an interrupted sweep
    resumes where it stopped; a damaged cell is re-run on its own.
    """
    out = Path(out_dir)
    cells = plan_cells(suite)
    if dry_run:
        return cells
    out.mkdir(parents=True, exist_ok=True)
    cache = out / "reference_cache"
    for cell in cells:
        cfg = cell_config(suite, cell.task, cell.model_kind, cell.budget, cell.k_steps)
        train_cfg = cell_config(suite, cell.task, cell.model_kind, cell.budget)
        tdir = out / cell.train_dir
        t_hash = io.content_hash(train_cfg.content_hash() + "generated")
        if force or valid_manifest(tdir, t_hash) is None:
            log.info("training %s/%s M=%d", cell.task, cell.model_kind, cell.budget)
            run_train(train_cfg, tdir, force=True)
        cdir = out / cell.cell_dir
        ckpt = tdir / "checkpoint.json"
        c_hash = io.content_hash(cfg.content_hash() + file_hash(ckpt))
        if not force and valid_manifest(cdir, c_hash) is not None:
            log.info("cell %s complete, skipping", cell)
            continue
        run_evaluate(cfg, ckpt, cdir, cache_root=cache, force=True)
    merge_results(out, cells)
    return cells


def merge_results(out: Path, cells: list[Cell]) -> Path:
    rows = []
    for cell in cells:
        agg = io.read_json(out / cell.cell_dir / "aggregate.json")
        for rep in agg["reports"]:
            a = rep["aggregates"]
            rows.append([rep["task"], rep["model_kind"], agg["M"], rep["K_steps"],
                         a["c2st"]["mean"], a["c2st"]["se"], a["mmd"]["mean"], a["mmd"]["se"],
                         a["rmse"]["mean"], a["rmse"]["se"],
                         "" if rep["max_ece"] is None else rep["max_ece"], rep["sampling_ms_per_1k"]])
    path = io.write_csv(out / "results.csv", AGGREGATE_HEADER, rows)
    io.write_csv(out / "c2st_vs_budget.csv", ["task", "model_kind", "K_steps", "M", "c2st_mean", "c2st_se"],
                 [[r[0], r[1], r[3], r[2], r[4], r[5]] for r in sorted(rows, key=lambda r: (r[0], r[1], r[3], r[2]))])
    return path


def parse_x_obs(text: str, task: str) -> np.ndarray:
    """Observation from a comma list or a headed CSV file."""
    p = Path(text)
    if p.is_file():
        _, values = io.read_matrix_csv(p)
        x = values[0] if values.shape[0] == 1 else values.ravel()
    else:
        try:
            x = np.array([float(v) for v in text.split(",")])
        except ValueError as exc:
            raise ConfigError(f"cannot parse observation {text!r}") from exc
    try:
        return get_task(task).check_x(x)[0]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
