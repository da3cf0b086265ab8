"""Command-line entry point: ``gistdesk synth|mine|train|eval|compare``.

All commands share one flat JSON config (see ``CONFIG_KEYS``). Values are
resolved as preset defaults, then the ``--config`` file, then explicit flags.
Every run writes ``run_manifest.json`` next to its outputs; passing that
manifest back as ``--config`` reproduces the run.
"""
import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, encoder, evalkit, guide as guides, kernels, mining, synthetic, trainer
from .errors import ConfigError, ContractError, DataError, GistError
from .selection import Strategy

log = logging.getLogger("gistdesk")

PRESETS = {
    "desk": {"learning_rate": 1e-2, "total_steps": 2000, "checkpoint_every": 1000, "dim": 8},
    "full": {"learning_rate": 5e-6, "total_steps": 100_000, "checkpoint_every": 10_000, "dim": 384},
}

_SYNTH_KEYS = [f.name for f in dataclasses.fields(synthetic.SynthConfig) if f.name != "seed"]
_TRAIN_KEYS = [f.name for f in dataclasses.fields(trainer.TrainConfig) if f.name not in ("loss", "seed")]
_LOSS_KEYS = ["temperature", "include_pp_rows", "reduction"]
_TOKENIZER_KEYS = [f.name for f in dataclasses.fields(encoder.TokenizerConfig)]
_MINE_KEYS = {"mine_k_p": "k_p", "mine_k_n": "k_n", "mine_temperature": "temperature",
              "mine_repeat": "repeat"}

CONFIG_KEYS = set(_SYNTH_KEYS) | set(_TRAIN_KEYS) | set(_LOSS_KEYS) | set(_TOKENIZER_KEYS) \
    | set(_MINE_KEYS) | {"seed", "dim", "strategies"}

STRATEGY_ORDER = [s.value for s in Strategy]


def resolve_config(preset, path, overrides):
    cfg = {"seed": 0}
    cfg.update(PRESETS[preset])
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
        if isinstance(loaded, dict) and isinstance(loaded.get("config"), dict):
            loaded = loaded["config"]  # a run manifest
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = sorted(set(loaded) - CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"{path}: unknown config key(s): {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _pick(cfg, keys):
    return {k: cfg[k] for k in keys if k in cfg}


def synth_config(cfg):
    return synthetic.SynthConfig(seed=cfg["seed"], **_pick(cfg, _SYNTH_KEYS))


def train_config(cfg):
    try:
        return trainer.TrainConfig(loss=trainer.LossConfig(**_pick(cfg, _LOSS_KEYS)), seed=cfg["seed"],
                                   **_pick(cfg, _TRAIN_KEYS))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def mining_config(cfg):
    return mining.MiningConfig(seed=cfg["seed"], **{v: cfg[k] for k, v in _MINE_KEYS.items() if k in cfg})


def initial_params(cfg):
    tok = encoder.TokenizerConfig(**_pick(cfg, _TOKENIZER_KEYS))
    dim = cfg["dim"]
    if not isinstance(dim, int) or dim < 1:
        raise ConfigError(f"dim must be a positive integer, got {dim!r}")
    return encoder.init_params(dim, tok, seed=cfg["seed"])


def parse_guide(spec):
    """``checkpoint:PATH``, ``store:PATH`` or ``oracle:CORPUS``."""
    if spec is None:
        return None
    kind, sep, path = spec.partition(":")
    if not sep or not path:
        raise ConfigError(f"guide spec must look like KIND:PATH, got {spec!r}")
    if kind == "checkpoint":
        return guides.FrozenEncoderGuide.from_checkpoint(path)
    if kind == "store":
        return guides.PrecomputedGuide.load(path)
    if kind == "oracle":
        return guides.LabelOracleGuide.from_items(mining.load_corpus(path).items, source=path)
    raise ConfigError(f"unknown guide kind {kind!r} (expected checkpoint, store or oracle)")


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Collects inputs/outputs and writes the run manifest."""

    def __init__(self, command, cfg, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.record = {"command": command, "config": cfg, "seed": cfg["seed"], "inputs": {},
                       "outputs": {}, "version": __version__, "backend": kernels.BACKEND,
                       "started": datetime.now(timezone.utc).isoformat()}

    def inputs(self, **paths):
        self.record["inputs"].update({k: str(v) for k, v in paths.items() if v is not None})

    def outputs(self, **paths):
        self.record["outputs"].update({k: str(v) for k, v in paths.items()})

    def finish(self):
        self.record["finished"] = datetime.now(timezone.utc).isoformat()
        path = self.out_dir / "run_manifest.json"
        path.write_text(json.dumps(self.record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


def cmd_synth(cfg, out_dir):
    scfg = synth_config(cfg)
    corpus = synthetic.generate(scfg)
    run = Run("synth", cfg, out_dir)
    paths = synthetic.write_corpus(corpus, out_dir)
    synthetic.to_eval_suite(corpus, Path(out_dir) / "suite")
    run.outputs(suite=Path(out_dir) / "suite" / "suite.json", **paths)
    run.finish()
    return paths


def _embedder(spec, cfg):
    if spec == "init":
        params = initial_params(cfg)
        return lambda texts: encoder.embed(texts, params)
    g = parse_guide(spec)
    if not hasattr(g, "embed"):
        raise ConfigError(f"embedder spec {spec!r} cannot embed text (use checkpoint:, store: or init)")
    return g.embed


def cmd_mine(cfg, out_dir, corpus_path, embedder_spec):
    corpus = mining.load_corpus(corpus_path)
    mcfg = mining_config(cfg)
    run = Run("mine", cfg, out_dir)
    run.inputs(corpus=corpus_path, embedder=embedder_spec)
    stats = mining.MiningStats()
    triplets = mining.mine_triplets(corpus, _embedder(embedder_spec, cfg), mcfg, stats)
    out = Path(out_dir) / "triplets.jsonl"
    mining.save_triplets(triplets, out)
    stats_path = Path(out_dir) / "mining_stats.json"
    stats_path.write_text(json.dumps({"per_class": stats.per_class, "skipped": stats.skipped,
                                      "triplets": len(triplets)}, indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")
    run.outputs(triplets=out, stats=stats_path)
    run.finish()
    return out


def _write_log(result, out_dir, prefix=""):
    jl = Path(out_dir) / f"{prefix}train_log.jsonl"
    cv = Path(out_dir) / f"{prefix}loss_curve.csv"
    result.log.write_jsonl(jl)
    result.log.write_csv(cv)
    return jl, cv


def cmd_train(cfg, out_dir, data_path, guide_spec=None, init_path=None, resume_path=None):
    tcfg = train_config(cfg)
    if tcfg.strategy is Strategy.GUIDED and guide_spec is None:
        raise ConfigError("strategy 'guided' requires --guide")
    data = mining.load_triplets(data_path)
    guide = parse_guide(guide_spec) if tcfg.strategy is Strategy.GUIDED else None
    run = Run("train", cfg, out_dir)
    run.inputs(data=data_path, guide=guide_spec, init=init_path, resume=resume_path)

    state, start = None, 0
    if resume_path is not None:
        params, state, start = trainer.load_training_checkpoint(resume_path)
    elif init_path is not None:
        params = encoder.load_checkpoint(init_path)
    else:
        params = initial_params(cfg)
        encoder.save_checkpoint(Path(out_dir) / "init.ckpt", params, meta={"seed": cfg["seed"]})
    result = trainer.train(data, params, guide, tcfg, out_dir=out_dir, start_step=start, state=state)
    jl, cv = _write_log(result, out_dir)
    run.outputs(final=result.checkpoints[-1], log=jl, loss_curve=cv,
                checkpoints=json.dumps([str(p) for p in result.checkpoints]))
    run.record["wall_clock_seconds"] = result.log.wall_clock
    run.finish()
    return result


def cmd_eval(cfg, out_dir, checkpoint, suite_path):
    suite = evalkit.load_suite(suite_path)
    params = encoder.load_checkpoint(checkpoint)
    run = Run("eval", cfg, out_dir)
    run.inputs(checkpoint=checkpoint, suite=suite_path)
    report = evalkit.evaluate(lambda texts: encoder.embed(texts, params), suite, seed=cfg["seed"],
                              checkpoint_id=file_sha256(checkpoint))
    js, cv = Path(out_dir) / "report.json", Path(out_dir) / "report.csv"
    report.write_json(js)
    report.write_csv(cv)
    run.outputs(report_json=js, report_csv=cv)
    run.finish()
    return report


COMPARE_FIXED = ["strategy", "final_loss", "step0_loss", "init_fullbatch_step0_loss", "mean"]


def cmd_compare(cfg, out_dir, data_path=None, guide_spec=None, suite_path=None):
    """Train every requested strategy from one initialization and evaluate on one suite."""
    out_dir = Path(out_dir)
    run = Run("compare", cfg, out_dir)
    names = cfg.get("strategies", STRATEGY_ORDER)
    if isinstance(names, str):
        names = [s.strip() for s in names.split(",") if s.strip()]
    strategies = [Strategy.parse(s) for s in names]

    if data_path is None:
        corpus = synthetic.generate(synth_config(cfg))
        synthetic.write_corpus(corpus, out_dir / "data")
        synthetic.to_eval_suite(corpus, out_dir / "data" / "suite")
        data_path = out_dir / "data" / "triplets.jsonl"
        suite_path = suite_path or out_dir / "data" / "suite" / "suite.json"
        guide_spec = guide_spec or f"oracle:{out_dir / 'data' / 'corpus.jsonl'}"
    if suite_path is None:
        raise ConfigError("compare on user data needs --suite")
    data = mining.load_triplets(data_path)
    suite = evalkit.load_suite(suite_path)
    guide = parse_guide(guide_spec)
    if Strategy.GUIDED in strategies and guide is None:
        raise ConfigError("strategy 'guided' requires --guide")
    run.inputs(data=data_path, suite=suite_path, guide=guide_spec)

    params = initial_params(cfg)
    init_path = out_dir / "init.ckpt"
    encoder.save_checkpoint(init_path, params, meta={"seed": cfg["seed"]})
    init_hash = file_sha256(init_path)

    # step-0 FullBatch loss on the shared initialization, identical for every row
    base = train_config(cfg)
    ref_cfg = dataclasses.replace(base, strategy=Strategy.FULLBATCH)
    idx = trainer.batch_indices(0, len(data), ref_cfg.batch_size, ref_cfg.seed)
    pairs_only = any(t.negative is None for t in data)
    ref_out, _ = trainer.batch_step([data[i] for i in idx], params, None, ref_cfg,
                                    encoder.GradAccumulator.like(params), pairs_only)

    rows, curves, reports = [], [], {}
    for strat in strategies:
        tcfg = dataclasses.replace(base, strategy=strat)
        sub = out_dir / strat.value
        sub.mkdir(exist_ok=True)
        result = trainer.train(data, params, guide, tcfg, out_dir=sub)
        _write_log(result, sub)
        report = evalkit.evaluate(lambda texts, p=result.params: encoder.embed(texts, p), suite,
                                  seed=cfg["seed"], checkpoint_id=file_sha256(result.checkpoints[-1]))
        report.write_json(sub / "report.json")
        reports[strat.value] = report
        losses = result.log.losses()
        row = {"strategy": strat.value, "final_loss": losses[-1] if losses else None,
               "step0_loss": losses[0] if losses else None,
               "init_fullbatch_step0_loss": ref_out.value, "mean": report.mean}
        for t in report.tasks:
            row[f"{t['name']}:{t['metric']}"] = t["value"]
        rows.append(row)
        for rec in result.log.records:
            curves.append({"strategy": strat.value, "step": rec["step"], "loss": rec["loss"], "lr": rec["lr"]})

    metric_cols = sorted({k for r in rows for k in r} - set(COMPARE_FIXED))
    columns = COMPARE_FIXED + metric_cols
    table_csv = out_dir / "comparison.csv"
    with open(table_csv, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (r[c] if isinstance(r[c], str) else repr(r[c]))
                        for c in columns])
    curves_csv = out_dir / "loss_curves.csv"
    with open(curves_csv, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, ["strategy", "step", "loss", "lr"], lineterminator="\n")
        w.writeheader()
        w.writerows(curves)

    delta = None
    if "guided" in reports and "fullbatch" in reports:
        delta = reports["guided"].metric("retrieval") - reports["fullbatch"].metric("retrieval")
    table_json = out_dir / "comparison.json"
    table_json.write_text(json.dumps({
        "columns": columns, "rows": rows, "init_checkpoint_sha256": init_hash,
        "guided_minus_fullbatch_ndcg@10": delta,
    }, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    run.outputs(table_csv=table_csv, table_json=table_json, loss_curves=curves_csv, init=init_path)
    run.finish()
    if delta is not None:
        print(f"guided - fullbatch retrieval nDCG@10: {delta:+.4f}")
    return rows, delta


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config or a previous run_manifest.json")
    common.add_argument("--seed", type=int, help="seed for generation, initialization, batching and mining")
    common.add_argument("--out-dir", required=True, help="directory for outputs and run_manifest.json")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gistdesk", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a planted-cluster corpus and eval suite")

    m = sub.add_parser("mine", parents=[common], help="mine triplets from a labeled corpus")
    m.add_argument("--corpus", required=True, help="JSONL with id, text, label")
    m.add_argument("--embedder", default="init",
                   help="checkpoint:PATH, store:PATH or init (fresh encoder from the config)")

    t = sub.add_parser("train", parents=[common], help="train the encoder")
    t.add_argument("--data", required=True, help="triplet JSONL")
    t.add_argument("--strategy", choices=STRATEGY_ORDER)
    t.add_argument("--guide", help="checkpoint:PATH, store:PATH or oracle:CORPUS")
    t.add_argument("--init", help="start from this checkpoint instead of a fresh encoder")
    t.add_argument("--resume", help="continue from a training checkpoint")
    t.add_argument("--steps", type=int, dest="total_steps")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a suite")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--suite", required=True, help="suite.json manifest")

    c = sub.add_parser("compare", parents=[common], help="train and evaluate each strategy")
    c.add_argument("--data", help="triplet JSONL (default: generate a synthetic corpus)")
    c.add_argument("--suite", help="suite.json (required with --data)")
    c.add_argument("--guide", help="guide spec (default for synthetic data: the label oracle)")
    c.add_argument("--strategies", help="comma-separated subset of " + ",".join(STRATEGY_ORDER))
    c.add_argument("--steps", type=int, dest="total_steps")
    return p


def run_command(args):
    overrides = {"seed": args.seed}
    if getattr(args, "strategy", None):
        overrides["strategy"] = args.strategy
    if getattr(args, "total_steps", None) is not None:
        overrides["total_steps"] = args.total_steps
    if getattr(args, "strategies", None):
        overrides["strategies"] = [s.strip() for s in args.strategies.split(",") if s.strip()]
    cfg = resolve_config(args.preset, args.config, overrides)
    if args.command == "synth":
        return cmd_synth(cfg, args.out_dir)
    if args.command == "mine":
        return cmd_mine(cfg, args.out_dir, args.corpus, args.embedder)
    if args.command == "train":
        return cmd_train(cfg, args.out_dir, args.data, args.guide, args.init, args.resume)
    if args.command == "eval":
        return cmd_eval(cfg, args.out_dir, args.checkpoint, args.suite)
    return cmd_compare(cfg, args.out_dir, args.data, args.guide, args.suite)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run_command(args)
    except (ConfigError, DataError, ContractError, GistError) as exc:
        print(f"gistdesk {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"gistdesk {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
