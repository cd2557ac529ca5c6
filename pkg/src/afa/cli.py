"""Command-line entry point: ``afa <command> [--config PATH] [--seed N] [--out DIR] ...``.

Every command writes its artifacts plus ``config.json`` (the fully defaulted
effective config) into ``--out``. Wall-clock timestamps only ever go to
``meta.json`` so all other outputs are byte-stable across reruns.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .agent import AgentConfig, QNetworkPair, rollout_all, train_agent
from .classifier import ClassifierConfig, ClassifierModel, MaskLabelCache, train_classifier
from .core import DatasetError, load_dataset, slot_names, split_dataset, write_dataset
from .env import RewardSpec, write_episodes
from .metrics import (
    evaluate_episodes,
    f1_vs_count_curve,
    lambda_sweep,
    make_report,
    pathway_tree,
    random_mask_baseline,
    write_curve_csv,
    write_sweep_csv,
)
from .neural import CheckpointError
from .synthgen import GeneratorSpec, generate, write_spec

log = logging.getLogger("afa")


class ConfigError(ValueError):
    pass


def _check_keys(section: str, d, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


@dataclass
class DataSection:
    path: str | None = None
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    expected_n: int = 4

    def to_dict(self):
        return {"path": self.path, "split_fractions": list(self.split_fractions),
                "split_seed": self.split_seed, "expected_n": self.expected_n}


@dataclass
class EvalSection:
    split: str = "test"
    lambdas: tuple[float, ...] = (0.001, 0.01, 0.1, 0.25, 5.0)
    sweep_seeds: tuple[int, ...] = (0, 1, 2)
    baseline_budgets: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, 4.0)

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"eval.split must be train, val or test, got {self.split!r}")

    def to_dict(self):
        return {"split": self.split, "lambdas": list(self.lambdas),
                "sweep_seeds": list(self.sweep_seeds), "baseline_budgets": list(self.baseline_budgets)}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    reward: RewardSpec = field(default_factory=RewardSpec)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    out_dir: str = "runs/default"

    SECTIONS = ("data", "generator", "classifier", "agent", "reward", "eval", "seed", "out_dir")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys("<root>", d, cls.SECTIONS)
        try:
            data = d.get("data", {})
            _check_keys("data", data, DataSection.__dataclass_fields__)
            ev = d.get("eval", {})
            _check_keys("eval", ev, EvalSection.__dataclass_fields__)
            reward = d.get("reward", {})
            _check_keys("reward", reward, ("lam",))
            for name in ("generator", "classifier", "agent"):
                if not isinstance(d.get(name, {}), dict):
                    raise ConfigError(f"config section {name!r} must be an object")
            cfg = cls(
                data=DataSection(**{**data, **({"split_fractions": tuple(data["split_fractions"])}
                                               if "split_fractions" in data else {})}),
                generator=GeneratorSpec.from_dict(d.get("generator", {})),
                classifier=ClassifierConfig.from_dict(d.get("classifier", {})),
                agent=AgentConfig.from_dict(d.get("agent", {})),
                reward=RewardSpec(**reward),
                eval=EvalSection(**{k: tuple(v) if isinstance(v, list) else v for k, v in ev.items()}),
                seed=int(d.get("seed", 0)),
                out_dir=str(d.get("out_dir", "runs/default")),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        return cfg.normalized()

    def normalized(self) -> "RunConfig":
        # the agent follows the run seed so one --seed controls a whole command
        self.agent = self.agent.replace(seed=self.seed)
        return self

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "generator": self.generator.to_dict(),
            "classifier": self.classifier.to_dict(),
            "agent": self.agent.to_dict(),
            "reward": {"lam": self.reward.lam},
            "eval": self.eval.to_dict(),
            "seed": self.seed,
            "out_dir": self.out_dir,
        }


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig().normalized()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: malformed JSON ({e.msg})") from None
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# helpers


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_rows(rows, fields, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields])


def _prepare_out(cfg: RunConfig, command: str, argv) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(cfg.to_dict(), out / "config.json")
    _dump_json({"command": command, "argv": list(argv), "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                "python": platform.python_version(), "numpy": np.__version__, "afa": __version__},
               out / "meta.json")
    handler = logging.FileHandler(out / f"{command}.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("afa").addHandler(handler)
    logging.getLogger("afa").setLevel(logging.INFO)
    return out


def _load_splits(cfg: RunConfig):
    if cfg.data.path is None:
        raise ConfigError("no dataset given (use --data or data.path)")
    records, summary = load_dataset(cfg.data.path, expected_n=cfg.data.expected_n)
    train, val, test = split_dataset(records, cfg.data.split_fractions, cfg.data.split_seed)
    log.info("dataset %s: %d studies, split %d/%d/%d", cfg.data.path, summary.n_studies,
             len(train), len(val), len(test))
    return train, val, test


def _load_classifier(path, studies) -> ClassifierModel:
    if path is None:
        raise ConfigError("--classifier-ckpt is required")
    model = ClassifierModel.load(path)
    if (model.n_slots, model.dim) != (studies[0].n_slots, studies[0].dim):
        raise CheckpointError(
            f"classifier expects {model.n_slots}x{model.dim} studies, data is "
            f"{studies[0].n_slots}x{studies[0].dim}")
    return model


def _load_agent(path, studies):
    if path is None:
        raise ConfigError("--agent-ckpt is required")
    pair, meta = QNetworkPair.load(path)
    if (pair.n_slots, pair.dim) != (studies[0].n_slots, studies[0].dim):
        raise CheckpointError(
            f"agent expects {pair.n_slots}x{pair.dim} studies, data is "
            f"{studies[0].n_slots}x{studies[0].dim}")
    return pair, meta


def _split(cfg, splits):
    return dict(zip(("train", "val", "test"), splits))[cfg.eval.split]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args, out: Path) -> dict:
    spec = cfg.generator
    records = generate(spec)
    path = out / "dataset.jsonl"
    write_dataset(records, path)
    write_spec(spec, out / "dataset.spec.json")
    log.info("wrote %d studies to %s", len(records), path)
    return {"dataset": str(path), "n_studies": len(records)}


def cmd_train_classifier(cfg: RunConfig, args, out: Path) -> dict:
    train, val, _ = _load_splits(cfg)
    model = train_classifier(train, val, cfg.classifier, seed=cfg.seed)
    ckpt = out / "classifier.json"
    model.save(ckpt)
    _write_rows(model.train_history, ["epoch", "train_loss", "val_bacc", "val_masked_loss"], out / "classifier_log.csv")
    best = max(r["val_bacc"] for r in model.train_history)
    return {"checkpoint": str(ckpt), "val_bacc": best}


def cmd_train_agent(cfg: RunConfig, args, out: Path) -> dict:
    train, val, _ = _load_splits(cfg)
    model = _load_classifier(args.classifier_ckpt, train)
    cache = MaskLabelCache.build(model, list(train) + list(val))
    pair, rows = train_agent(train, val, cache, cfg.reward, cfg.agent)
    metric = cfg.agent.select_by
    best = max(range(len(rows)), key=lambda i: (rows[i][metric], -i))
    ckpt = out / "agent.json"
    pair.save(ckpt, {"reward": {"lam": cfg.reward.lam}, "agent_config": cfg.agent.to_dict(),
                     "selected_epoch": rows[best]["epoch"], "val_bacc": rows[best]["val_bacc"]})
    from .agent import LOG_FIELDS

    _write_rows(rows, LOG_FIELDS, out / "agent_log.csv")
    return {"checkpoint": str(ckpt), "selected_epoch": rows[best]["epoch"],
            "val_bacc": rows[best]["val_bacc"], "val_count": rows[best]["mean_acquired_count"]}


def cmd_eval(cfg: RunConfig, args, out: Path) -> dict:
    splits = _load_splits(cfg)
    studies = _split(cfg, splits)
    model = _load_classifier(args.classifier_ckpt, studies)
    cache = MaskLabelCache.build(model, studies)
    n = studies[0].n_slots
    if args.agent_ckpt is None:
        # full acquisition, no agent
        full = (1 << n) - 1
        preds = [cache.label_for(s.study_id, full) for s in studies]
        report = make_report(preds, [s.label for s in studies], [n] * len(studies), n)
        episodes = []
    else:
        pair, meta = _load_agent(args.agent_ckpt, studies)
        agent_cfg = AgentConfig(append_mask=pair.append_mask,
                                allow_reselect=meta.get("agent_config", {}).get("allow_reselect", False))
        lam = cfg.reward.lam if args.lam is not None else meta.get("reward", {}).get("lam", cfg.reward.lam)
        episodes = rollout_all(pair.online, cache, studies, RewardSpec(lam), agent_cfg)
        report = evaluate_episodes(episodes, n)
    result = {"split": cfg.eval.split, **report.to_dict()}
    _dump_json(result, out / "eval_report.json")
    write_episodes(episodes, out / "episodes.jsonl")
    return result


def cmd_sweep(cfg: RunConfig, args, out: Path) -> dict:
    train, val, test = _load_splits(cfg)
    model = _load_classifier(args.classifier_ckpt, train)
    cache = MaskLabelCache.build(model, list(train) + list(val) + list(test))
    rows = lambda_sweep(cfg.eval.lambdas, train, val, test, cache, cfg.agent, seeds=cfg.eval.sweep_seeds)
    write_sweep_csv(rows, out / "sweep.csv")
    baseline = random_mask_baseline(cache, test, cfg.eval.baseline_budgets, seeds=cfg.eval.sweep_seeds)
    write_curve_csv(f1_vs_count_curve(rows, baseline), out / "f1_vs_count.csv")
    _dump_json([{"lam": r.lam, "failed": r.failed, "count_std": r.count_std, "per_seed": r.per_seed}
                for r in rows], out / "sweep_runs.json")
    return {"sweep": str(out / "sweep.csv"), "rows": len(rows), "failed": sum(r.failed for r in rows)}


def cmd_pathway(cfg: RunConfig, args, out: Path) -> dict:
    splits = _load_splits(cfg)
    studies = _split(cfg, splits)
    model = _load_classifier(args.classifier_ckpt, studies)
    pair, meta = _load_agent(args.agent_ckpt, studies)
    cache = MaskLabelCache.build(model, studies)
    agent_cfg = AgentConfig(append_mask=pair.append_mask,
                            allow_reselect=meta.get("agent_config", {}).get("allow_reselect", False))
    lam = meta.get("reward", {}).get("lam", cfg.reward.lam)
    episodes = rollout_all(pair.online, cache, studies, RewardSpec(lam), agent_cfg)
    tree = pathway_tree(episodes, slot_names(studies[0].views))
    (out / "pathway.dot").write_text(tree.to_dot(), encoding="utf-8")
    _dump_json(tree.to_dict(), out / "pathway.json")
    return {"dot": str(out / "pathway.dot"), "episodes": len(episodes),
            "conservation_violations": len(tree.conservation_violations())}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-classifier": cmd_train_classifier,
    "train-agent": cmd_train_agent,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "pathway": cmd_pathway,
}


class _JsonArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _JsonArgParser(prog="afa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_JsonArgParser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if name != "gen-data":
            p.add_argument("--data", default=None, help="JSONL dataset")
        if name in ("train-agent", "eval", "sweep", "pathway"):
            p.add_argument("--classifier-ckpt", default=None)
        if name in ("eval", "pathway"):
            p.add_argument("--agent-ckpt", default=None)
            p.add_argument("--split", choices=["train", "val", "test"], default=None)
        if name in ("train-agent", "eval"):
            p.add_argument("--lambda", dest="lam", type=float, default=None)
        if name == "gen-data":
            p.add_argument("--n-studies", type=int, default=None)
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
        if args.command == "gen-data":
            cfg.generator.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "data", None) is not None:
        cfg.data.path = args.data
    if getattr(args, "lam", None) is not None:
        cfg.reward = RewardSpec(args.lam)
    if getattr(args, "split", None) is not None:
        cfg.eval.split = args.split
    if getattr(args, "n_studies", None) is not None:
        cfg.generator.n_studies = args.n_studies
    cfg.generator.validate()
    return cfg.normalized()


ERROR_CODES = {ConfigError: 2, FileNotFoundError: 3, DatasetError: 4, CheckpointError: 5}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    handler = None
    try:
        args = build_parser().parse_args(argv)
        cfg = _apply_overrides(load_config(args.config), args)
        out = _prepare_out(cfg, args.command, argv)
        handler = logging.getLogger("afa").handlers[-1]
        result = COMMANDS[args.command](cfg, args, out)
    except Exception as e:
        code = next((c for t, c in ERROR_CODES.items() if isinstance(e, t)), 1)
        print(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": code}), file=sys.stderr)
        return code
    finally:
        if handler is not None:
            logging.getLogger("afa").removeHandler(handler)
            handler.close()
    print(json.dumps({"status": "ok", "command": args.command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
