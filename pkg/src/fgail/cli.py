"""Command-line entry point: ``fgail {expert,demos,train,eval,divbench,export-fstar}``.

Every command reads one JSON config (all fields optional apart from what
the command needs) and writes its outputs under ``--out``. Exit codes:
0 success, 1 configuration error, 2 numeric error, 3 IO error. Set
``FDIV_LOG`` to ``error``, ``info`` or ``debug`` for log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as envmod
from . import metrics
from .conjugate import eval_fstar
from .divergence import (
    DiscreteDist,
    GaussianSpec,
    closed_form,
    exact_divergence_discrete,
    gaussian_oracle,
)
from .errors import ConfigurationError, FgailError, NumericError
from .nets import MlpParams, load_checkpoint, policy_distribution, save_checkpoint
from .trainer import (
    Discriminator,
    TrainConfig,
    derived_seed,
    fit_variational,
    learned_spec,
    policy_fn,
    reference_returns,
    train,
    train_rl,
)

log = logging.getLogger("fgail")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
DEMO_PRESETS = (1, 4, 7, 10)
EVAL_EPISODES = 50


# configuration ----------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    env_id: str = "gridworld"
    algorithm: str = "fgail"
    demo_count: int = 10
    demo_max_pairs: int | None = None  # None: 50 for cartpole_lite, full episodes for gridworld
    expert_epochs: int = 300
    expert_target: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs"
    seed: int = 0
    checkpoint: str | None = None  # expert checkpoint (demos) or trained policy (eval)
    demos: str | None = None
    divbench: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.env_id not in envmod.ENVIRONMENTS:
            raise ConfigurationError(f"unknown env_id {self.env_id!r}")
        if self.demo_count < 1:
            raise ConfigurationError("demo_count must be at least 1")

    @classmethod
    def from_dict(cls, data: dict, seed=None):
        if not isinstance(data, dict):
            raise ConfigurationError("the config must be a JSON object")
        data = dict(data)
        names = {f.name for f in dataclasses.fields(cls)}
        train_names = {f.name for f in dataclasses.fields(TrainConfig)}
        train_data = dict(data.pop("train", {}) or {})
        # TrainConfig fields may also sit at the top level
        for key in list(data):
            if key not in names and key in train_names:
                train_data[key] = data.pop(key)
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        if seed is not None:
            data["seed"] = seed
        data.setdefault("seed", 0)
        train_data["seed"] = data["seed"]
        if "algorithm" in data:
            train_data.setdefault("algorithm", data["algorithm"])
        env_defaults = ENV_TRAIN_DEFAULTS.get(data.get("env_id", "gridworld"), {})
        for key, value in env_defaults.items():
            train_data.setdefault(key, value)
        data["train"] = TrainConfig.from_dict(train_data)
        data["algorithm"] = data["train"].algorithm
        return cls(**data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def make_env(self):
        return envmod.make_env(self.env_id)

    def max_pairs(self):
        if self.demo_max_pairs is not None:
            return self.demo_max_pairs
        return 50 if self.env_id == "cartpole_lite" else None


ENV_TRAIN_DEFAULTS = {
    "gridworld": {
        "pairs_per_epoch": 200,
        "discriminator_steps": 5,
        "adam_reward": {"learning_rate": 1e-3},
        "adam_ficnn": {"learning_rate": 1e-3},
    },
    "cartpole_lite": {"pairs_per_epoch": 2000},
}


def load_config(path, seed=None) -> ExperimentConfig:
    if path is None:
        data = {}
    else:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(data, seed)


def config_hash(cfg: ExperimentConfig) -> str:
    doc = cfg.to_dict()
    doc.pop("output_dir", None)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
            cwd=Path(__file__).resolve().parent, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    if not os.access(p, os.W_OK):
        raise PermissionError(f"{p} is not writable")
    return p


def new_run_dir(root, name) -> Path:
    """Create ``root/name`` (or ``name.1``, ``name.2``, ...) without touching existing runs."""
    root = _ensure_dir(root)
    candidate, k = root / name, 0
    while True:
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            k += 1
            candidate = root / f"{name}.{k}"


# experts and demos --------------------------------------------------------


def build_expert(cfg: ExperimentConfig):
    """Returns ``(policy_callable, networks_to_save, meta)``."""
    env = cfg.make_env()
    if cfg.env_id == "gridworld":
        table, V = envmod.value_iteration_expert(env.mdp, tolerance=1e-12)
        meta = {"kind": "table", "table": table.tolist(), "v_start": float(V @ env.mdp.initial)}
        return envmod.table_policy(env, table), {}, meta
    train_cfg = dataclasses.replace(cfg.train, epochs=cfg.expert_epochs)
    target = cfg.expert_target if cfg.expert_target is not None else 0.995 * env.horizon
    policy, value, history = train_rl(env, train_cfg, target=target)
    meta = {"kind": "mlp", "training_returns": history}
    return policy_fn(policy), {"policy": policy, "value": value}, meta


def load_expert(path, env_id):
    nets, meta = load_checkpoint(path)
    if meta.get("env_id") != env_id:
        raise ConfigurationError(
            f"checkpoint is for {meta.get('env_id')!r}, config asks for {env_id!r}"
        )
    env = envmod.make_env(env_id)
    if meta.get("kind") == "table":
        return envmod.table_policy(env, np.asarray(meta["table"])), meta
    if "policy" not in nets:
        raise ConfigurationError(f"{path} holds no policy network")
    return policy_fn(nets["policy"]), meta


def make_demos(cfg: ExperimentConfig, expert, seed=None):
    env = cfg.make_env()
    seed = derived_seed(cfg.seed, 10) if seed is None else seed
    trajs = envmod.sample_trajectories(env, expert, cfg.demo_count, seed, max_steps=cfg.max_pairs())
    return envmod.DemoSet(trajs, env.env_id, "expert")


# commands ---------------------------------------------------------------


def cmd_expert(cfg: ExperimentConfig, out: Path):
    out = _ensure_dir(out)
    env = cfg.make_env()
    expert, nets, meta = build_expert(cfg)
    mean, std = envmod.evaluate_policy(env, expert, EVAL_EPISODES, derived_seed(cfg.seed, 7))
    rand_mean, rand_std = envmod.evaluate_policy(
        env, envmod.uniform_policy(env.n_actions), EVAL_EPISODES, derived_seed(cfg.seed, 8)
    )
    meta.update(env_id=cfg.env_id, seed=cfg.seed)
    save_checkpoint(out / "expert.json", nets, meta)
    score = {
        "env_id": cfg.env_id, "episodes": EVAL_EPISODES, "expert_mean": mean, "expert_std": std,
        "random_mean": rand_mean, "random_std": rand_std,
    }
    _write_json(out / "expert_score.json", score)
    log.info("expert %s: %.4f +- %.4f over %d episodes", cfg.env_id, mean, std, EVAL_EPISODES)
    return score


def _expert_path(cfg, out):
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(out) / "expert.json"


def cmd_demos(cfg: ExperimentConfig, out: Path):
    out = _ensure_dir(out)
    path = _expert_path(cfg, out)
    if not path.exists():
        raise FileNotFoundError(f"expert checkpoint {path} not found; run `fgail expert` first")
    expert, _ = load_expert(path, cfg.env_id)
    demos = make_demos(cfg, expert)
    target = out / f"demos_{cfg.env_id}_{cfg.demo_count}.jsonl"
    envmod.write_demos(target, demos.trajectories)
    return target


def _reference(cfg, out, env):
    """(expert_mean, random_mean) from the nearest expert_score.json, if any."""
    places = [Path(out)]
    if cfg.checkpoint:
        ck = Path(cfg.checkpoint).resolve().parent
        places += [ck, ck.parent]
    for place in places:
        score_path = place / "expert_score.json"
        if score_path.exists():
            s = json.loads(score_path.read_text())
            if s.get("env_id") == cfg.env_id:
                return s["expert_mean"], s["random_mean"]
    return None


def _load_demos(cfg, out):
    if cfg.demos:
        path = Path(cfg.demos)
    else:
        path = Path(out) / f"demos_{cfg.env_id}_{cfg.demo_count}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"demo file {path} not found; run `fgail demos` first")
    return envmod.read_demos(path, cfg.env_id)


def cmd_train(cfg: ExperimentConfig, out: Path):
    """Train and write epochs.csv, stats.csv, density.csv, fstar_curve.csv and a manifest."""
    out = _ensure_dir(out)
    env = cfg.make_env()
    demos = _load_demos(cfg, out)
    reference = _reference(cfg, out, env)
    run = new_run_dir(out, f"{cfg.algorithm}-{config_hash(cfg)}-s{cfg.seed}")
    started = time.time()
    result = train(cfg.train, env, demos, reference)
    wall = time.time() - started

    nets = {"policy": result.policy}
    if result.value is not None:
        nets["value"] = result.value
    disc = result.discriminator
    if disc is not None:
        nets["reward"] = disc.reward
        if disc.learnable:
            nets["ficnn"] = disc.ficnn
    save_checkpoint(run / "model.json", nets, {
        "env_id": cfg.env_id, "algorithm": cfg.algorithm, "seed": cfg.seed,
        "kind": "mlp", "bounds": list(disc.bounds) if disc and disc.bounds else None,
        "reward_bound": cfg.train.reward_bound,
    })
    if cfg.algorithm != "bc":
        metrics.write_epochs(run / "epochs.csv", result.reports)
        if result.final_u is not None and result.final_u.size:
            ut = _zero_gap_point(disc)
            stats = metrics.input_stats(result.final_u, ut, min_samples=1)
            last = result.reports[-1].epoch if result.reports else 0
            metrics.write_stats(run / "stats.csv", [(last, stats)])
            metrics.write_density(run / "density.csv", metrics.kde(result.final_u))
        if disc.learnable:
            metrics.write_fstar_curve(run / "fstar_curve.csv", disc.fstar_np, disc.bounds)
    manifest = {
        "config": cfg.to_dict(), "config_hash": config_hash(cfg), "seed": cfg.seed,
        "git_describe": git_describe(), "wall_time_s": wall, "python": platform.python_version(),
        "epochs_completed": len(result.reports),
        "final_u_count": int(result.final_u.size) if result.final_u is not None else 0,
        "zero_gap_point_rule": "Alg. 2 descent endpoint, grid-refined; flat zero-gap regions "
                               "report the descent endpoint",
    }
    _write_json(run / "manifest.json", manifest)
    if result.error is not None:
        _write_json(run / "error.json", {"type": type(result.error).__name__,
                                         "message": str(result.error),
                                         "epochs_completed": len(result.reports)})
        raise result.error
    return run


def _zero_gap_point(disc: Discriminator):
    if disc.learnable:
        return metrics.find_zero_gap_point(disc.ficnn, disc.bounds)
    spec = disc.spec
    # the closed-form minimum gap is not zero for JS_star (it is log 4); locate its minimiser
    lo = -20.0
    hi = -1e-9 if spec.conjugate_domain[1] == 0.0 else 20.0
    grid = np.linspace(lo, hi, 200_001)
    gap = spec.fstar(grid) - grid
    return float(grid[int(np.argmin(gap))])


def cmd_eval(cfg: ExperimentConfig, out: Path):
    out = _ensure_dir(out)
    env = cfg.make_env()
    if not cfg.checkpoint:
        raise ConfigurationError("eval needs `checkpoint` (a trained model.json or expert.json)")
    nets, meta = load_checkpoint(cfg.checkpoint)
    if meta.get("env_id") != cfg.env_id:
        raise ConfigurationError(f"checkpoint is for {meta.get('env_id')!r}")
    if meta.get("kind") == "table":
        pol = envmod.table_policy(env, np.asarray(meta["table"]))
    else:
        pol = policy_fn(nets["policy"])
    mean, std = envmod.evaluate_policy(env, pol, EVAL_EPISODES, derived_seed(cfg.seed, 9))
    ref = _reference(cfg, out, env)
    doc = {"env_id": cfg.env_id, "episodes": EVAL_EPISODES, "mean": mean, "std": std}
    if ref is not None:
        doc["normalized_return"] = envmod.normalized_return(mean, *ref)
    _write_json(out / "eval.json", doc)
    return doc


# divergence benchmark ---------------------------------------------------

DIVBENCH_DEFAULTS = {
    "specs": ["KL", "RKL", "JS_star"],
    "distribution": "gaussian",
    "P": {"mean": 0.0, "std": 1.0},
    "Q": {"mean": 1.0, "std": 1.0},
    "sample_counts": [10000],
    "steps": 2000,
    "hidden": [32, 32],
    "learning_rate": 1e-3,
    "batch_size": 512,
}


def cmd_divbench(cfg: ExperimentConfig, out: Path):
    out = _ensure_dir(out)
    opts = {**DIVBENCH_DEFAULTS, **cfg.divbench}
    unknown = set(opts) - set(DIVBENCH_DEFAULTS)
    if unknown:
        raise ConfigurationError(f"unknown divbench fields: {sorted(unknown)}")
    rows = []
    for name in opts["specs"]:
        for n in opts["sample_counts"]:
            rng = np.random.default_rng([cfg.seed, 20, int(n)])
            if opts["distribution"] == "gaussian":
                P, Q = GaussianSpec(**opts["P"]), GaussianSpec(**opts["Q"])
                xp, xq = P.sample(n, rng), Q.sample(n, rng)
                hp, hq = P.sample(n, rng), Q.sample(n, rng)
                oracle = gaussian_oracle(name, P, Q) if name != "learned" else float("nan")
            elif opts["distribution"] == "discrete":
                P, Q = DiscreteDist(np.asarray(opts["P"])), DiscreteDist(np.asarray(opts["Q"]))
                k = P.probs.size
                xp, xq = np.eye(k)[P.sample(n, rng)], np.eye(k)[Q.sample(n, rng)]
                hp, hq = np.eye(k)[P.sample(n, rng)], np.eye(k)[Q.sample(n, rng)]
                oracle = (exact_divergence_discrete(P, Q, closed_form(name))
                          if name != "learned" else float("nan"))
            else:
                raise ConfigurationError(f"unknown distribution {opts['distribution']!r}")
            fit = fit_variational(
                xp, xq, name, seed=derived_seed(cfg.seed, 21, n), steps=opts["steps"],
                hidden=tuple(opts["hidden"]), learning_rate=opts["learning_rate"],
                batch_size=opts["batch_size"],
            )
            est = fit.estimate(hp, hq)
            rows.append((name, n, est, oracle, oracle - est))
    metrics.write_csv(out / "divbench.csv", ("spec", "n_samples", "estimate", "oracle",
                                             "gap_to_oracle"), rows)
    return rows


def cmd_export_fstar(cfg: ExperimentConfig, out: Path):
    out = _ensure_dir(out)
    if not cfg.checkpoint:
        raise ConfigurationError("export-fstar needs `checkpoint` (a trained model.json)")
    nets, meta = load_checkpoint(cfg.checkpoint)
    if "ficnn" not in nets:
        raise ConfigurationError("checkpoint holds no learned conjugate (train with fgail)")
    bounds = meta.get("bounds") or (-10.0, 10.0)
    ficnn = nets["ficnn"]
    target = out / "fstar_curve.csv"
    metrics.write_fstar_curve(target, lambda u: eval_fstar(ficnn, u), bounds)
    return target


COMMANDS = {
    "expert": cmd_expert,
    "demos": cmd_demos,
    "train": cmd_train,
    "eval": cmd_eval,
    "divbench": cmd_divbench,
    "export-fstar": cmd_export_fstar,
}


def build_parser():
    p = argparse.ArgumentParser(prog="fgail", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file (defaults for every field)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (default: the config's output_dir)")
    return p


def setup_logging():
    level = os.environ.get("FDIV_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigurationError(f"FDIV_LOG must be one of {sorted(levels)}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        cfg = load_config(args.config, args.seed)
        out = Path(args.out or cfg.output_dir)
        COMMANDS[args.command](cfg, out)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FgailError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
