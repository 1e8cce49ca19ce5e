"""Command-line experiments: train, eval, compare, gradcheck.

Configuration is a YAML file (schema version 1, see ``README.md``); any field
can be overridden with ``--set section.key=value``. All randomness comes from
named streams derived from the single ``seed``, so equal configs produce
identical CSV files.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import bonusnet, envsim, pgrd, uct
from .envsim import ConfigError

log = logging.getLogger("pgrd_uct")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_NUMERICAL = 0, 2, 3, 4
STREAMS = ("env", "planner", "policy", "init", "eval", "mean_image")


def rng_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose (and optional sub-index)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS.index(name), *extra)))


@dataclass
class PreprocessConfig:
    frame_stack: int = 4
    mean_games: int = 10
    mean_max_steps: int = 200


@dataclass
class EvalConfig:
    n_games: int = 20
    max_steps: int = 200
    checkpoint: str | None = None
    every: int = 0  # extra instrumentation: greedy eval every K training episodes


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    mode: str = "train"
    env: envsim.EnvSpec = field(default_factory=lambda: envsim.EnvSpec(
        "DelayedCorridor", {"length": 12}, num_actions=3))
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    network: list = field(default_factory=lambda: [{"conv": [4, [1, 3], 1]}, "relu", {"dense": 16}, "relu"])
    planner: uct.PlannerParams = field(default_factory=lambda: uct.PlannerParams(16, 4, 0.1, 0.99))
    train: pgrd.TrainConfig = field(default_factory=lambda: pgrd.TrainConfig(
        learning_rate=0.01, max_episodes=300, episode_cap=40))
    eval: EvalConfig = field(default_factory=EvalConfig)
    timing: bool = False
    version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["env"] = dataclasses.asdict(self.env)
        return d


_SECTIONS = {"env": envsim.EnvSpec, "preprocess": PreprocessConfig, "planner": uct.PlannerParams,
             "train": pgrd.TrainConfig, "eval": EvalConfig}


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def config_from_dict(raw: dict | None, overrides=()) -> ExperimentConfig:
    """Build a config from a parsed YAML mapping plus ``key=value`` overrides."""
    base = ExperimentConfig().to_dict()
    raw = dict(raw or {})
    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    for key, value in raw.items():
        if key not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            base[key].update(value)
        else:
            base[key] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        if k.split(".")[0] not in base:
            raise ConfigError(f"unknown config key {k!r}")
        _set_path(base, k, yaml.safe_load(v))
    try:
        kwargs = {}
        for key, value in base.items():
            if key in _SECTIONS:
                kwargs[key] = _SECTIONS[key](**value)
            else:
                kwargs[key] = value
        cfg = ExperimentConfig(**kwargs)
        bonusnet.parse_layers(cfg.network)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.mode not in ("train", "eval", "compare", "gradcheck"):
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    return cfg


def load_config(path=None, overrides=()) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
    return config_from_dict(raw, overrides)


@dataclass
class Setup:
    env: envsim.Env
    pre: envsim.Preprocessor
    spec: bonusnet.NetworkSpec


def build(cfg: ExperimentConfig, mean_image=None) -> Setup:
    """Environment, preprocessor (with mean image) and network spec for a config."""
    env = envsim.make_env(cfg.env)
    if mean_image is None:
        mean_image = envsim.compute_mean_image(env, cfg.preprocess.mean_games, rng_stream(cfg.seed, "mean_image"),
                                               cfg.preprocess.mean_max_steps)
    pre = envsim.Preprocessor(env, np.asarray(mean_image, dtype=float), cfg.preprocess.frame_stack)
    layers = bonusnet.parse_layers(cfg.network) + [bonusnet.Dense(env.num_actions)]
    try:
        spec = bonusnet.NetworkSpec(layers, pre.obs_shape, env.num_actions)
    except bonusnet.ShapeError as exc:
        raise ConfigError(str(exc)) from exc
    return Setup(env, pre, spec)


@dataclass
class EvalReport:
    scores: list
    mean: float
    stderr: float
    n_games: int

    @classmethod
    def from_scores(cls, scores) -> "EvalReport":
        s = np.asarray(scores, dtype=float)
        se = float(s.std(ddof=1) / math.sqrt(len(s))) if len(s) > 1 else 0.0
        return cls(list(scores), float(s.mean()), se, len(s))


def play_game(env, pre, spec, theta, planner, rng, max_steps) -> int:
    """One evaluation game: greedy root action, stops only at game over (or ``max_steps``)."""
    bonus = uct.RewardBonus(spec, theta, pre) if theta is not None else None
    s = env.reset()
    history = (s,)
    for _ in range(max_steps):
        result = uct.plan(env, s, history, bonus, planner, rng)
        a = uct.select_greedy(result.root_q, rng)
        s = env.step(s, a, rng).next_state
        if s.game_over:
            break
        history = (history + (s,))[-pre.frame_stack:]
    return s.score


def evaluate(env, pre, spec, theta, planner, n_games=20, seed=0, max_steps=200) -> EvalReport:
    """Raw game scores over ``n_games`` greedy games with fixed ``theta``.

    ``theta=None`` plans with objective rewards only. Game ``k`` uses its own
    random stream, so results do not depend on evaluation order.
    """
    scores = [play_game(env, pre, spec, theta, planner, rng_stream(seed, "eval", k), max_steps)
              for k in range(n_games)]
    return EvalReport.from_scores(scores)


def ratio(a: float, b: float) -> float:
    if b == 0:
        return math.nan if a == 0 else math.copysign(math.inf, a)
    return a / b


COMPARE_COLUMNS = ("env", "RO_mean", "RO_stderr", "RI_mean", "RI_stderr", "RO_deeper_mean", "RO_deeper_stderr",
                   "RO_wider_mean", "RO_wider_stderr", "RI_over_RO", "RI_over_max_deeper_wider")


def compare_arms(setup: Setup, theta, planner: uct.PlannerParams, n_games=20, seed=0, max_steps=200):
    """Evaluate the four arms and return ``(reports, ratio_row)``.

    Arms: objective reward at the base budget, learned reward at the base
    budget, objective reward with doubled depth, objective reward with
    doubled trajectories.
    """
    arms = {
        "RO": (None, planner),
        "RI": (theta, planner),
        "RO_deeper": (None, dataclasses.replace(planner, max_depth=2 * planner.max_depth)),
        "RO_wider": (None, dataclasses.replace(planner, n_trajectories=2 * planner.n_trajectories)),
    }
    reports = {name: evaluate(setup.env, setup.pre, setup.spec, th, pp, n_games, seed, max_steps)
               for name, (th, pp) in arms.items()}
    row = {"env": type(setup.env).__name__}
    for name, rep in reports.items():
        row[f"{name}_mean"] = rep.mean
        row[f"{name}_stderr"] = rep.stderr
    row["RI_over_RO"] = ratio(reports["RI"].mean, reports["RO"].mean)
    row["RI_over_max_deeper_wider"] = ratio(reports["RI"].mean,
                                            max(reports["RO_deeper"].mean, reports["RO_wider"].mean))
    return reports, row


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _save(path, setup: Setup, theta, cfg, **meta):
    bonusnet.save_checkpoint(path, setup.spec, theta, mean_image=setup.pre.mean_image.tolist(),
                             config=cfg.to_dict(), **meta)


def _load_trained(cfg: ExperimentConfig, path):
    if path is None:
        raise ConfigError("this mode needs a checkpoint (--checkpoint or eval.checkpoint)")
    try:
        spec, theta, meta = bonusnet.load_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    setup = build(cfg, meta.get("mean_image"))
    if spec != setup.spec:
        raise ConfigError("checkpoint network does not match the configured network")
    return setup, theta


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    setup = build(cfg)
    theta0 = bonusnet.init_params(setup.spec, rng_stream(cfg.seed, "init"))
    ckpt_every = cfg.train.checkpoint_every
    eval_every = cfg.eval.every
    periodic = []

    def on_episode(ep, theta, row):
        if ep % 50 == 0:
            log.info("episode %d steps %d u %.1f b %.4f", ep, row["steps"], row["u_hT"], row["baseline_b"])
        if ckpt_every and (ep + 1) % ckpt_every == 0:
            _save(out / f"checkpoint_{ep + 1:06d}.npz", setup, theta, cfg, episode=ep + 1)
        if eval_every and (ep + 1) % eval_every == 0:
            rep = evaluate(setup.env, setup.pre, setup.spec, theta, cfg.planner, cfg.eval.n_games, cfg.seed,
                           cfg.eval.max_steps)
            periodic.append({"episode": ep + 1, "mean": rep.mean, "stderr": rep.stderr})

    theta, rows = pgrd.train(setup.env, setup.pre, setup.spec, theta0, cfg.planner, cfg.train,
                             rng_stream(cfg.seed, "planner"), rng_stream(cfg.seed, "policy"),
                             on_episode=on_episode, timing=cfg.timing, rng_env=rng_stream(cfg.seed, "env"))
    _write_csv(out / "train_log.csv", pgrd.TRAIN_LOG_COLUMNS, rows)
    if periodic:
        _write_csv(out / "periodic_eval.csv", ("episode", "mean", "stderr"), periodic)
    if not np.all(np.isfinite(theta)):
        log.error("training produced non-finite parameters")
        return EXIT_NUMERICAL
    _save(out / "final.npz", setup, theta, cfg, episode=len(rows))
    print(f"trained {len(rows)} episodes; checkpoint {out / 'final.npz'}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.eval.checkpoint is None:
        setup, theta, arm = build(cfg), None, "RO"
    else:
        (setup, theta), arm = _load_trained(cfg, cfg.eval.checkpoint), "RI"
    rep = evaluate(setup.env, setup.pre, setup.spec, theta, cfg.planner, cfg.eval.n_games, cfg.seed,
                   cfg.eval.max_steps)
    _write_csv(out / f"eval_{arm}.csv", ("game", "score"),
               [{"game": k, "score": s} for k, s in enumerate(rep.scores)])
    print(f"{arm}: {rep.mean:.3f} ({rep.stderr:.3f}) over {rep.n_games} games")
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    setup, theta = _load_trained(cfg, cfg.eval.checkpoint)
    reports, row = compare_arms(setup, theta, cfg.planner, cfg.eval.n_games, cfg.seed, cfg.eval.max_steps)
    for name, rep in reports.items():
        _write_csv(out / f"arm_{name}.csv", ("game", "score"),
                   [{"game": k, "score": s} for k, s in enumerate(rep.scores)])
    _write_csv(out / "ratios.csv", COMPARE_COLUMNS, [row])
    for name, rep in reports.items():
        print(f"{name:10s} {rep.mean:10.3f} ({rep.stderr:.3f})")
    print(f"RI/RO = {row['RI_over_RO']:.3f}   RI/max(deeper,wider) = {row['RI_over_max_deeper_wider']:.3f}")
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    from .checks import run_gradchecks

    ok = run_gradchecks(cfg.seed)
    return EXIT_OK if ok else EXIT_NUMERICAL


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "compare": cmd_compare, "gradcheck": cmd_gradcheck}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgrd-uct", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="mode", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. train.learning_rate=0.001")
        if name in ("eval", "compare"):
            p.add_argument("--checkpoint")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set) + [f"mode={args.mode}"]
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    if getattr(args, "checkpoint", None):
        overrides.append(f"eval.checkpoint={args.checkpoint}")
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[cfg.mode](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pgrd.NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
