"""Command line entry point: ``trajreplay <command> [options]``.

Every command accepts ``--config`` (YAML), ``--seed``, ``--threads`` and
``--dry-run``. Flags override the config file. Each output file embeds the
resolved run configuration.

Exit codes: 0 success, 1 internal error, 2 invalid input or config.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import nn
from .config import from_dict, merge, plain
from .data import (ConfigError, CorpusParseError, CorpusValidationError, DegenerateSceneError, SceneConfig,
                   UnsupportedRateError, extract_scenes, load_corpus, normalize_scene, read_scene_archive,
                   resample, split_scenes, write_scene_archive)
from .lifelong import STRATEGIES, ChainConfig, TaskArchive, TaskChain, UnknownStrategyError, _Memo, run_chain
from .mdn import CkldConfig, MdnConfig, ckld, scene_pairs, train_mdn
from .predictor import (PredictorConfig, PredictorModel, curves_to_csv, evaluate_rmse, reports_to_csv,
                        train_predictor)
from .r2gan import (ConditionSampler, DiscriminatorConfig, DiscriminatorModel, GanConfig, GeneratorConfig,
                    GeneratorModel, GpPriorConfig, replay, train_r2gan)
from .synthetic import SYNTHETIC_NAMES, synthetic_scenes

log = logging.getLogger("trajreplay")


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


INPUT_ERRORS = (InputError, FileNotFoundError, IsADirectoryError, CorpusParseError, CorpusValidationError,
                ConfigError, UnsupportedRateError, UnknownStrategyError, DegenerateSceneError, yaml.YAMLError)


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    threads: int = 1
    out: str | None = None
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return plain({"command": self.command, "seed": self.seed, "threads": self.threads, "out": self.out,
                      "params": self.params})


# ---------------------------------------------------------------------------
# helpers


def _load_yaml(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise InputError(f"{p}: config must be a mapping")
    return data


def _build(cls, d):
    try:
        return from_dict(cls, d)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid {cls.__name__}: {exc}") from None


def _write_json(path: Path, payload: dict, run: RunConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(payload)
    body["run_config"] = run.to_dict()
    path.write_text(json.dumps(plain(body), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, text: str, run: RunConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    head = "# run_config: " + json.dumps(run.to_dict(), sort_keys=True) + "\n"
    path.write_text(head + text, encoding="utf-8")


def _read_archive(path: str):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"scene archive not found: {p}")
    try:
        return read_scene_archive(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{p}: {exc}") from None


def _scenes_from(source: str, scene_cfg: SceneConfig, seed: int, size: int):
    """A synthetic corpus name or an archive path; returns (header, scenes)."""
    if source in SYNTHETIC_NAMES:
        return {"scene_config": scene_cfg.to_dict(), "source": source}, synthetic_scenes(source, scene_cfg, seed, size)
    return _read_archive(source)


def _same_schema(headers, names) -> None:
    configs = [json.dumps(h.get("scene_config"), sort_keys=True) for h in headers]
    if len(set(configs)) > 1:
        raise InputError("scene archives have different scene configurations: " + ", ".join(names))


def _out_dir(run: RunConfig) -> Path:
    if not run.out:
        raise InputError("--out is required")
    return Path(run.out)


def _save_model(path: Path, params: nn.ModelParams, kind: str, cfg, run: RunConfig, extra: dict | None = None):
    path.parent.mkdir(parents=True, exist_ok=True)
    config = {"kind": kind, "model_config": plain(cfg), "run_config": run.to_dict()}
    if extra:
        config.update(plain(extra))
    nn.save_checkpoint(path, params, config=config, seed=run.seed)


def _load_model(path: str, kind: str):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"checkpoint not found: {p}")
    try:
        params, header = nn.load_checkpoint(p)
    except (ValueError, KeyError, OSError) as exc:
        raise InputError(f"{p}: {exc}") from None
    config = header.get("config") or {}
    if config.get("kind") != kind:
        raise InputError(f"{p}: expected a {kind} checkpoint, found {config.get('kind')!r}")
    return params, config


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, run: RunConfig, conf: dict) -> int:
    scene_cfg = _build(SceneConfig, conf.get("scene"))
    if args.synthetic:
        if args.synthetic not in SYNTHETIC_NAMES:
            raise InputError(f"unknown synthetic corpus {args.synthetic!r}; choose from {', '.join(SYNTHETIC_NAMES)}")
        scenes = synthetic_scenes(args.synthetic, scene_cfg, run.seed, args.size)
        source = f"synthetic:{args.synthetic}"
    else:
        if not args.input:
            raise InputError("give an input corpus or --synthetic NAME")
        p = Path(args.input)
        if not p.is_file():
            raise InputError(f"corpus file not found: {p}")
        recs = load_corpus(p, rate_hz=args.rate_hz)
        if recs.rate_hz is None:
            raise InputError(f"{p}: sampling rate unknown; add '# rate_hz=' or pass --rate-hz")
        recs = resample(recs, recs.rate_hz, scene_cfg.rate_hz)
        scenes = extract_scenes(recs, scene_cfg, stride=args.stride, source=str(p))
        source = str(p)
    run.params.update({"scene": scene_cfg.to_dict(), "source": source})
    print(f"scenes: {len(scenes)}")
    if args.dry_run:
        return 0
    out = _out_dir(run)
    write_scene_archive(out, scenes, scene_cfg, extra={"source": source, "run_config": run.to_dict()})
    print(f"wrote {out}")
    return 0


def cmd_ckld(args, run: RunConfig, conf: dict) -> int:
    scene_cfg = _build(SceneConfig, conf.get("scene"))
    mdn_cfg = _build(MdnConfig, merge(conf.get("mdn", {}), {"seed": run.seed}))
    ckld_cfg = _build(CkldConfig, merge(conf.get("ckld", {}), {"rng_seed": run.seed}))
    if len(args.archives) < 1:
        raise InputError("ckld needs at least one archive")
    if args.pairs != "all" and len(args.archives) > 2:
        raise InputError("more than two archives need --pairs all")
    loaded = [_scenes_from(a, scene_cfg, run.seed, args.size) for a in args.archives]
    _same_schema([h for h, _ in loaded], args.archives)
    if loaded[0][0].get("scene_config"):
        scene_cfg = SceneConfig.from_dict(loaded[0][0]["scene_config"])
    run.params.update({"scene": scene_cfg.to_dict(), "mdn": mdn_cfg.to_dict(), "ckld": plain(ckld_cfg),
                       "archives": list(args.archives), "pairs": args.pairs, "shared_model": args.shared})
    if args.dry_run:
        return 0
    out = _out_dir(run)
    pairs = [scene_pairs(s, scene_cfg) for _, s in loaded]
    models = []
    for i, (_, s) in enumerate(loaded):
        if args.shared and i > 0:
            models.append(models[0])
        else:
            models.append(train_mdn(s, mdn_cfg, scene_cfg))
    if args.pairs == "all":
        n = len(loaded)
        mat = np.zeros((n, n))
        results = {}
        for i in range(n):
            for j in range(n):
                if i != j:
                    r = ckld(models[i], models[j], pairs[i][0], ckld_cfg, threads=run.threads)
                    mat[i, j] = r.mean
                    results[f"{i},{j}"] = r.to_json()
        lines = ["corpus," + ",".join(args.archives)]
        lines += [args.archives[i] + "," + ",".join(f"{v:.6f}" for v in mat[i]) for i in range(n)]
        _write_csv(out / "ckld_matrix.csv", "\n".join(lines) + "\n", run)
        _write_json(out / "ckld.json", {"corpora": list(args.archives), "matrix": mat, "pairs": results}, run)
        print(f"wrote {out / 'ckld_matrix.csv'}")
        return 0
    second = 1 if len(loaded) > 1 else 0
    r = ckld(models[0], models[second], pairs[0][0], ckld_cfg, threads=run.threads)
    _write_json(out / "ckld.json", {"corpora": [args.archives[0], args.archives[second]], **r.to_json()}, run)
    print(f"ckld: {r.mean:.6f} +/- {r.stderr:.6f}")
    return 0


def _normalized(scenes):
    return [normalize_scene(s) for s in scenes]


def cmd_train_gan(args, run: RunConfig, conf: dict) -> int:
    header, scenes = _read_archive(args.archive)
    scene_cfg = SceneConfig.from_dict(header["scene_config"])
    gen_cfg = _build(GeneratorConfig, merge(conf.get("generator", {}),
                                            {"t_h": scene_cfg.t_h, "t_f": scene_cfg.t_f, "seed": run.seed}))
    dis_cfg = _build(DiscriminatorConfig, merge(conf.get("discriminator", {}),
                                                {"t_h": scene_cfg.t_h, "t_f": scene_cfg.t_f, "seed": run.seed + 1}))
    gan_d = merge(conf.get("gan", {}), {"seed": run.seed})
    if args.epochs is not None:
        gan_d["epochs"] = args.epochs
    gp = _build(GpPriorConfig, merge(gan_d.pop("gp", {}), {"sequence_length": scene_cfg.t}))
    gan_cfg = _build(GanConfig, gan_d)
    gan_cfg.gp = gp
    run.params.update({"archive": args.archive, "generator": gen_cfg, "discriminator": dis_cfg, "gan": gan_cfg})
    if args.dry_run:
        return 0
    out = _out_dir(run)
    scenes = _normalized(scenes)
    gen, dis, tlog = train_r2gan(scenes, GeneratorModel(gen_cfg), DiscriminatorModel(dis_cfg), gan_cfg)
    labels = sorted({tuple(s.position_labels.tolist()) for s in scenes})
    sampler = ConditionSampler.from_scenes(scenes)
    _save_model(out / "generator.npz", gen.params, "generator", gen_cfg, run,
                {"gp": gp, "scene": scene_cfg.to_dict(), "sampler": {"support": [list(k) for k in sampler.support],
                                       "probs": sampler.probs.tolist()}})
    _save_model(out / "discriminator.npz", dis.params, "discriminator", dis_cfg, run)
    _write_json(out / "gan_log.json", {"d_loss": tlog.d_loss, "g_loss": tlog.g_loss, "energy": tlog.energy,
                                       "collapsed": tlog.collapsed, "warnings": tlog.warnings,
                                       "label_sets": len(labels), "generator": gen.provenance_id}, run)
    print(f"generator {gen.provenance_id}; final energy distance {tlog.energy[-1]:.4f}")
    return 0


def cmd_replay(args, run: RunConfig, conf: dict) -> int:
    params, config = _load_model(args.generator, "generator")
    gen_cfg = _build(GeneratorConfig, config["model_config"])
    gp = _build(GpPriorConfig, config["gp"])
    sampler = _sampler_from(config["sampler"])
    scene_cfg = _build(SceneConfig, config["scene"])
    run.params.update({"generator": args.generator, "n": args.n})
    if args.n < 0:
        raise InputError("--n must be >= 0")
    if args.dry_run:
        return 0
    out = _out_dir(run)
    gen = GeneratorModel(gen_cfg, params)
    scenes = replay(gen, args.n, sampler, gp, seed=run.seed)
    write_scene_archive(out, scenes, scene_cfg, extra={"source": gen.provenance_id, "run_config": run.to_dict()})
    print(f"scenes: {len(scenes)}")
    return 0


def _sampler_from(d: dict) -> ConditionSampler:
    return ConditionSampler.from_distribution([tuple(k) for k in d["support"]], d["probs"])


def cmd_train_predictor(args, run: RunConfig, conf: dict) -> int:
    loaded = [_read_archive(a) for a in args.archives]
    _same_schema([h for h, _ in loaded], args.archives)
    scene_cfg = SceneConfig.from_dict(loaded[0][0]["scene_config"])
    pd = merge(conf.get("predictor", {}), {"t_h": scene_cfg.t_h, "t_f": scene_cfg.t_f, "seed": run.seed})
    if args.epochs is not None:
        pd["epochs"] = args.epochs
    pcfg = _build(PredictorConfig, pd)
    init = None
    if args.init:
        params, config = _load_model(args.init, "predictor")
        init = PredictorModel(_build(PredictorConfig, config["model_config"]), params)
    run.params.update({"archives": list(args.archives), "predictor": pcfg, "init": args.init})
    if args.dry_run:
        return 0
    out = _out_dir(run)
    scenes = [s for _, ss in loaded for s in _normalized(ss)]
    model = train_predictor(scenes, pcfg, init=init)
    _save_model(out / "predictor.npz", model.params, "predictor", pcfg, run)
    _write_json(out / "predictor_log.json", {"history": model.history, "model_id": model.model_id}, run)
    print(f"predictor {model.model_id}")
    return 0


def cmd_evaluate(args, run: RunConfig, conf: dict) -> int:
    params, config = _load_model(args.predictor, "predictor")
    model = PredictorModel(_build(PredictorConfig, config["model_config"]), params)
    loaded = [_read_archive(a) for a in args.archives]
    run.params.update({"predictor": args.predictor, "archives": list(args.archives)})
    if args.dry_run:
        return 0
    out = _out_dir(run)
    reports = {}
    for path, (header, scenes) in zip(args.archives, loaded):
        step = SceneConfig.from_dict(header["scene_config"]).step_seconds
        reports[path] = evaluate_rmse(model, _normalized(scenes), step, task_id=path)
    _write_json(out / "eval.json", {"reports": {k: r.to_json() for k, r in reports.items()}}, run)
    _write_csv(out / "eval_horizons.csv", reports_to_csv(reports), run)
    _write_csv(out / "eval_curves.csv", curves_to_csv(reports), run)
    for k, r in reports.items():
        horizons = "".join(f" {h:g}s={v:.3f}" for h, v in r.horizon_rmse().items())
        print(f"{k}: mean={r.mean_rmse:.3f}{horizons}")
    return 0


def _chain_tasks(names, scene_cfg: SceneConfig, seed: int, size: int, test_size: int):
    tasks = []
    for i, name in enumerate(names):
        if name in SYNTHETIC_NAMES:
            train = synthetic_scenes(name, scene_cfg, seed=seed, size=size)
            test = synthetic_scenes(name, scene_cfg, seed=seed + 10_000, size=test_size)
        else:
            header, scenes = _read_archive(name)
            if json.dumps(header.get("scene_config"), sort_keys=True) != json.dumps(scene_cfg.to_dict(),
                                                                                      sort_keys=True):
                raise InputError(f"{name}: scene configuration differs from the chain's")
            train, _, test = split_scenes(scenes, seed=seed)
        tasks.append(TaskArchive(name, _normalized(train), _normalized(test)))
    return tasks


def cmd_chain(args, run: RunConfig, conf: dict) -> int:
    chain_d = dict(conf.get("chain", {}))
    strategies = args.strategy or conf.get("strategy") or "GRTP-D"
    strategies = list(STRATEGIES) if strategies == "all" else [s.strip() for s in str(strategies).split(",")]
    for s in strategies:
        if s not in STRATEGIES:
            raise UnknownStrategyError(s)
    names = args.tasks.split(",") if args.tasks else conf.get("tasks")
    if not names:
        raise InputError("no tasks given; use --tasks or a 'tasks' list in the config")
    cfg = _build(ChainConfig, chain_d)
    size = args.size if args.size is not None else conf.get("size", 200)
    test_size = conf.get("test_size", max(1, size // 4))
    run.params.update({"tasks": list(names), "strategies": strategies, "chain": cfg.to_dict(), "size": size,
                       "test_size": test_size})
    for n in names:
        if n not in SYNTHETIC_NAMES and not Path(n).is_file():
            raise InputError(f"task {n!r} is neither a synthetic corpus nor an archive file")
    if args.dry_run:
        print("config ok: " + ", ".join(strategies) + " on " + ", ".join(names))
        return 0
    out = _out_dir(run)
    tasks = _chain_tasks(names, cfg.scene, run.seed, size, test_size)
    memo = _Memo()
    status = 0
    for s in strategies:
        rep = run_chain(TaskChain(tasks, s, cfg, run.seed), memo)
        _write_json(out / f"{s}_report.json", rep.to_json(), run)
        _write_csv(out / f"{s}_matrix.csv", rep.matrix_csv(), run)
        _write_csv(out / f"{s}_curves.csv", rep.curves_csv(), run)
        if rep.status != "complete":
            print(f"{s}: partial, failed at {rep.failed_stage}: {rep.error}", file=sys.stderr)
            status = 1
        else:
            final = len(names) - 1
            print(f"{s}: " + " ".join(f"{t}={rep.rmse(final, t):.3f}" for t in names))
    return status


COMMANDS = {
    "ingest": cmd_ingest,
    "ckld": cmd_ckld,
    "train-gan": cmd_train_gan,
    "replay": cmd_replay,
    "train-predictor": cmd_train_predictor,
    "evaluate": cmd_evaluate,
    "chain": cmd_chain,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file; flags override its values")
    common.add_argument("--seed", type=int, default=None, help="master seed (default: config or 0)")
    common.add_argument("--threads", type=int, default=None, help="worker bound for parallel stages")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--dry-run", action="store_true", help="validate inputs and config, write nothing")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="trajreplay", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="corpus -> scene archive")
    s.add_argument("input", nargs="?")
    s.add_argument("--synthetic", help=f"built-in corpus: {', '.join(SYNTHETIC_NAMES)}")
    s.add_argument("--size", type=int, default=200, help="size parameter of the synthetic corpus")
    s.add_argument("--rate-hz", type=float, default=None, help="source sampling rate if not in the file")
    s.add_argument("--stride", type=int, default=1)

    s = sub.add_parser("ckld", parents=[common], help="conditional KL between scene archives")
    s.add_argument("archives", nargs="+", help="archive paths or synthetic corpus names")
    s.add_argument("--pairs", choices=("first", "all"), default="first")
    s.add_argument("--shared", action="store_true", help="fit one MDN and reuse it for every archive")
    s.add_argument("--size", type=int, default=2000)

    s = sub.add_parser("train-gan", parents=[common], help="train the conditional GAN on an archive")
    s.add_argument("archive")
    s.add_argument("--epochs", type=int, default=None)

    s = sub.add_parser("replay", parents=[common], help="generate scenes from a generator checkpoint")
    s.add_argument("--generator", required=True)
    s.add_argument("--n", type=int, required=True)

    s = sub.add_parser("train-predictor", parents=[common], help="train the trajectory predictor")
    s.add_argument("archives", nargs="+")
    s.add_argument("--init", help="predictor checkpoint to fine-tune")
    s.add_argument("--epochs", type=int, default=None)

    s = sub.add_parser("evaluate", parents=[common], help="RMSE of a predictor on archives")
    s.add_argument("--predictor", required=True)
    s.add_argument("archives", nargs="+")

    s = sub.add_parser("chain", parents=[common], help="run a lifelong task chain")
    s.add_argument("--tasks", help="comma separated synthetic names or archive paths")
    s.add_argument("--strategy", help=f"one of {', '.join(STRATEGIES)}, a comma list, or 'all'")
    s.add_argument("--size", type=int, default=None, help="synthetic corpus size per task")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = _load_yaml(args.config)
        seed = args.seed if args.seed is not None else int(conf.get("seed", 0))
        threads = args.threads if args.threads is not None else int(conf.get("threads", 1))
        if threads < 1:
            raise InputError("--threads must be >= 1")
        run = RunConfig(args.command, seed, threads, args.out, {"config_file": args.config})
        return COMMANDS[args.command](args, run, conf)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level guard
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
