"""``mosekit`` command line: file-based pipeline stages with run manifests.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .datagen import (LANGS, gen_corpus, gen_triplets, load_snippets, load_triplets, plant_near_duplicates,
                      read_jsonl, write_jsonl)
from .dedup import dedup_triplets, lsh_dedup
from .evalkit import harness, report
from .evalkit.permtest import permutation_test
from .model import (CHECK_MODE_ENV, ConfigError, EncoderConfig, check_mode, init, load_checkpoint,
                    save_checkpoint)
from .packing import RepoIndex
from .tokenizer import build_vocab
from .training import (ClonePair, NumericError, OptimizerConfig, TrainPlan, embed_texts, finetune_clone,
                       finetune_retrieval, make_clone_pairs, pretrain)

log = logging.getLogger("mosekit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_SUFFIX = ".manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --- config -------------------------------------------------------------------

DEFAULT_CONFIG = {
    "data": {"repos": 32, "snippets_per_repo": 16, "programs_per_snippet": 2, "langs": list(LANGS),
             "triplets": 512, "dup_rate": 0.0, "vocab_max": 4096, "dedup_threshold": 0.7},
    "model": {k: v for k, v in asdict(EncoderConfig(vocab_size=6)).items() if k != "vocab_size"},
    "optim": asdict(OptimizerConfig()),
    "plan": asdict(TrainPlan()),
    "eval": {"distractors": harness.DESK_DISTRACTORS, "task": "t2c", "threshold": 0.5, "n_perm": 10_000,
             "alpha": 0.05},
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config section in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(path: str | None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from None
        for section, values in user.items():
            if section not in cfg or not isinstance(values, dict):
                raise UsageError(f"unknown config section {section!r}")
            for k, v in values.items():
                set_dotted(cfg, f"{section}.{k}", v)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_dotted(cfg, k.strip(), _parse_value(v))
    return cfg


def _build(cls, values: dict, **extra):
    names = {f.name for f in fields(cls)}
    try:
        return cls(**{k: v for k, v in values.items() if k in names}, **extra)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad {cls.__name__} settings: {e}") from None


def model_config(cfg: dict, vocab_size: int) -> EncoderConfig:
    mc = _build(EncoderConfig, cfg["model"], vocab_size=vocab_size)
    bad = mc.problems()
    if bad:
        raise UsageError("invalid model config: " + "; ".join(bad))
    return mc


def parse_exits(text: str | None, available) -> list[int]:
    if text is None or text == "all":
        return list(available)
    try:
        exits = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise UsageError(f"--exits expects 'all' or a comma list of integers, got {text!r}") from None
    missing = [e for e in exits if e not in available]
    if not exits or missing:
        raise UsageError(f"exits {missing or exits} not available; model exits are {list(available)}")
    return exits


# --- manifest -----------------------------------------------------------------

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def write_manifest(out: Path, command: str, argv, cfg: dict, seed: int, inputs: dict, outputs: dict,
                   started: float) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config": cfg,
        "seed": seed,
        "check_mode": check_mode(),
        "inputs": {k: str(Path(v).resolve()) for k, v in inputs.items() if v},
        "outputs": {k: {"path": str(Path(p).resolve()), "sha256": sha256(Path(p))} for k, p in outputs.items()},
        "version": __version__,
        "torch": torch.__version__,
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = out / (command.replace(" ", "_") + MANIFEST_SUFFIX)
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


# --- helpers ------------------------------------------------------------------

def _need_file(path: str | None, flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file {path}")
    return p


def _load(loader, path: Path):
    try:
        return loader(path)
    except (json.JSONDecodeError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read {path}: {e!r}") from None


def _load_ckpt(path: Path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None


def _write_log(path: Path, logs) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in logs:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_reports(path: Path, reports) -> None:
    path.write_text(json.dumps([r.to_record() for r in reports], indent=1) + "\n", encoding="utf-8")


def _read_reports(path: Path):
    return _load(lambda p: [harness.ExitReport.from_record(r) for r in json.loads(p.read_text("utf-8"))], path)


def _load_pairs(path: Path) -> list[ClonePair]:
    return _load(lambda p: [ClonePair(r["a"], r["b"], r.get("label")) for r in read_jsonl(p)], path)


def _clone_pairs(args, seed: int) -> tuple[list[ClonePair], dict]:
    if args.pairs:
        path = _need_file(args.pairs, "--pairs")
        return _load_pairs(path), {"pairs": path}
    path = _need_file(args.triplets, "--triplets or --pairs")
    return make_clone_pairs(_load(load_triplets, path), seed), {"triplets": path}


def _init_or_load(args, cfg: dict, texts) -> tuple:
    """Load ``--ckpt`` or initialise a fresh model with a vocabulary built from ``texts``."""
    if args.ckpt:
        path = _need_file(args.ckpt, "--ckpt")
        return _load_ckpt(path), {"ckpt": path}
    vocab = build_vocab(texts, cfg["data"]["vocab_max"])
    mc = model_config(cfg, len(vocab))
    if args.exits:
        mc.exits = tuple(parse_exits(args.exits, range(1, mc.depth + 1)))
    return init(mc, args.seed, vocab=vocab), {}


def _plan(cfg: dict, mode: str, seed: int) -> TrainPlan:
    return _build(TrainPlan, {**cfg["plan"], "mode": mode, "seed": seed})


def _optim(cfg: dict) -> OptimizerConfig:
    return _build(OptimizerConfig, cfg["optim"])


# --- commands -----------------------------------------------------------------
# Each returns (inputs, outputs, summary).

def cmd_gen(args, cfg, out: Path):
    d = cfg["data"]
    corpus = gen_corpus(args.seed, d["repos"], d["snippets_per_repo"], d["langs"],
                        programs_per_snippet=d["programs_per_snippet"])
    planted = []
    if d["dup_rate"] > 0 and corpus:
        corpus, planted = plant_near_duplicates(corpus, d["dup_rate"], args.seed)
    triplets = gen_triplets(args.seed, d["triplets"], d["langs"]) if d["triplets"] else []
    paths = {"corpus": out / "corpus.jsonl", "triplets": out / "triplets.jsonl"}
    write_jsonl(paths["corpus"], corpus)
    write_jsonl(paths["triplets"], triplets)
    if planted:
        paths["planted"] = out / "planted.json"
        paths["planted"].write_text(json.dumps(planted) + "\n", encoding="utf-8")
    return {}, paths, {"snippets": len(corpus), "triplets": len(triplets), "planted": len(planted)}


def cmd_dedup(args, cfg, out: Path):
    if not args.corpus and not args.triplets:
        raise UsageError("dedup needs --corpus and/or --triplets")
    thr = cfg["data"]["dedup_threshold"]
    inputs, outputs, summary, removed = {}, {}, {}, {}
    if args.corpus:
        p = _need_file(args.corpus, "--corpus")
        kept, rem = lsh_dedup(_load(load_snippets, p), thr)
        outputs["corpus"] = out / "corpus.dedup.jsonl"
        write_jsonl(outputs["corpus"], kept)
        inputs["corpus"], removed["corpus"] = p, rem
        summary.update(snippets_kept=len(kept), snippets_removed=len(rem))
    if args.triplets:
        p = _need_file(args.triplets, "--triplets")
        kept, rem = dedup_triplets(_load(load_triplets, p), thr)
        outputs["triplets"] = out / "triplets.dedup.jsonl"
        write_jsonl(outputs["triplets"], kept)
        inputs["triplets"], removed["triplets"] = p, rem
        summary.update(triplets_kept=len(kept), triplets_removed=len(rem))
    outputs["removed"] = out / "removed.json"
    outputs["removed"].write_text(json.dumps(removed, indent=1) + "\n", encoding="utf-8")
    return inputs, outputs, summary


def cmd_pretrain(args, cfg, out: Path):
    path = _need_file(args.corpus, "--corpus")
    corpus = _load(load_snippets, path)
    if not corpus:
        raise DataError(f"{path} holds no snippets")
    ckpt, inputs = _init_or_load(args, cfg, corpus)
    plan = _plan(cfg, "pretrain", args.seed)
    ckpt, logs = pretrain(ckpt, RepoIndex(corpus, ckpt.vocab), plan, _optim(cfg))
    outputs = {"ckpt": out / "pretrain.ckpt", "log": out / "pretrain_log.jsonl"}
    save_checkpoint(ckpt, outputs["ckpt"])
    _write_log(outputs["log"], logs)
    return {"corpus": path, **inputs}, outputs, {"steps": plan.steps, "final_loss": logs[-1]["loss"] if logs else None}


def cmd_finetune(args, cfg, out: Path):
    plan = _plan(cfg, f"finetune_{args.task}", args.seed)
    if args.task == "retrieval":
        path = _need_file(args.triplets, "--triplets")
        triplets = _load(load_triplets, path)
        if len(triplets) < 2:
            raise DataError("retrieval fine-tuning needs at least 2 triplets")
        texts = [x for t in triplets for x in (t.nl, t.code_a.text, t.code_b.text)]
        ckpt, inputs = _init_or_load(args, cfg, texts)
        ckpt, logs = finetune_retrieval(ckpt, triplets, plan, _optim(cfg))
        inputs["triplets"] = path
    else:
        pairs, inputs = _clone_pairs(args, args.seed)
        if not pairs:
            raise DataError("no clone pairs")
        ckpt, more = _init_or_load(args, cfg, [x for p in pairs for x in (p.a, p.b)])
        inputs.update(more)
        ckpt, logs = finetune_clone(ckpt, pairs, plan, _optim(cfg))
    outputs = {"ckpt": out / f"finetune_{args.task}.ckpt", "log": out / f"finetune_{args.task}_log.jsonl"}
    save_checkpoint(ckpt, outputs["ckpt"])
    _write_log(outputs["log"], logs)
    return inputs, outputs, {"steps": plan.steps, "final_loss": logs[-1]["loss"] if logs else None}


def _texts_for_embedding(args) -> tuple[list[str], list[str], dict]:
    path = _need_file(args.input, "--input")
    recs = _load(read_jsonl, path)
    field = args.field
    try:
        ids = [r["id"] for r in recs]
        texts = [r[field]["text"] if isinstance(r[field], dict) else r[field] for r in recs]
    except KeyError as e:
        raise DataError(f"{path}: record lacks field {e}") from None
    return ids, texts, {"input": path}


def cmd_embed(args, cfg, out: Path):
    cpath = _need_file(args.ckpt, "--ckpt")
    ckpt = _load_ckpt(cpath)
    ids, texts, inputs = _texts_for_embedding(args)
    exits = parse_exits(args.exits, ckpt.config.exits)
    emb = embed_texts(ckpt, texts, exits, cfg["plan"]["max_len"])
    outputs = {"ids": out / "embeddings_ids.json"}
    outputs["ids"].write_text(json.dumps(ids) + "\n", encoding="utf-8")
    for e in exits:
        outputs[f"exit_{e}"] = out / f"embeddings_exit{e}.npy"
        np.save(outputs[f"exit_{e}"], emb[e].double().numpy())
    return {"ckpt": cpath, **inputs}, outputs, {"items": len(ids), "exits": exits}


def cmd_eval(args, cfg, out: Path):
    cpath = _need_file(args.ckpt, "--ckpt")
    ckpt = _load_ckpt(cpath)
    exits = parse_exits(args.exits, ckpt.config.exits)
    ev = cfg["eval"]
    max_len = cfg["plan"]["max_len"]
    if args.task == "retrieval":
        path = _need_file(args.triplets, "--triplets")
        triplets = _load(load_triplets, path)
        queries, pool = harness.triplet_queries(triplets, ev["task"])
        n_d = min(ev["distractors"], len(pool) - 1) if args.clip_distractors else ev["distractors"]
        try:
            reports = harness.retrieval_eval(ckpt, queries, pool, exits, n_d, args.seed, ev["task"], max_len)
        except ValueError as e:
            raise DataError(str(e)) from None
        inputs = {"ckpt": cpath, "triplets": path}
    else:
        pairs, inputs = _clone_pairs(args, args.seed)
        reports = harness.clone_eval(ckpt, pairs, exits, ev["threshold"], max_len)
        inputs["ckpt"] = cpath
    outputs = {"reports": out / f"eval_{args.task}.json"}
    _write_reports(outputs["reports"], reports)
    key = "recall_at_1" if args.task == "retrieval" else "f1"
    return inputs, outputs, {"exits": exits, key: {str(r.exit): r.metrics.get(key) for r in reports}}


def cmd_report(args, cfg, out: Path):
    if not args.reports:
        raise UsageError("report needs at least one --reports file")
    paths = [_need_file(p, "--reports") for p in args.reports]
    reports = [r for p in paths for r in _read_reports(p)]
    inputs = {f"reports_{i}": p for i, p in enumerate(paths)}
    if args.baseline:
        bpaths = [_need_file(p, "--baseline") for p in args.baseline]
        single = [r for p in bpaths for r in _read_reports(p)]
        multi = [r for r in reports if r.task in {s.task for s in single}]
        by_task = sorted({r.task for r in single})
        for task in by_task:
            reports += report.self_distillation_deltas([r for r in multi if r.task == task],
                                                       [s for s in single if s.task == task], f"{task}_sd_delta")
        inputs.update({f"baseline_{i}": p for i, p in enumerate(bpaths)})
    written = report.tradeoff_report(reports, out / "report", figure=not args.no_figure)
    return inputs, dict(written), {"rows": len(reports)}


def cmd_permtest(args, cfg, out: Path):
    cpath = _need_file(args.ckpt, "--ckpt")
    tpath = _need_file(args.triplets, "--triplets")
    ckpt = _load_ckpt(cpath)
    triplets = _load(load_triplets, tpath)
    if not triplets:
        raise DataError("no triplets")
    exits = parse_exits(args.exits, ckpt.config.exits)
    ev = cfg["eval"]
    scores = harness.positive_pair_scores(ckpt, triplets, exits, ev["task"], cfg["plan"]["max_len"])
    results = []
    for i, a in enumerate(exits):
        for b in exits[i + 1:]:
            p, reject = permutation_test(scores[a], scores[b], ev["n_perm"], ev["alpha"], args.seed)
            results.append({"exit_a": a, "exit_b": b, "mean_a": float(scores[a].mean()),
                            "mean_b": float(scores[b].mean()), "p_value": p, "reject": reject})
    outputs = {"pvalues": out / "permtest.json"}
    outputs["pvalues"].write_text(json.dumps(results, indent=1) + "\n", encoding="utf-8")
    if not args.no_figure:
        outputs["figure"] = report.plot_permtest_heatmap(
            exits, {e: float(scores[e].mean()) for e in exits},
            {(r["exit_a"], r["exit_b"]): r["p_value"] for r in results}, out / "permtest.png")
    return {"ckpt": cpath, "triplets": tpath}, outputs, {"pairs": len(results),
                                                         "rejected": sum(r["reject"] for r in results)}


def cmd_selfcheck(args, cfg, out: Path):
    from .checks import CHECKS, run_check
    names = args.only or list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise UsageError(f"unknown checks {unknown}; available: {list(CHECKS)}")
    results = []
    for n in names:
        r = run_check(n)
        print(r.line(), file=sys.stderr)
        results.append(r)
    outputs = {"results": out / "selfcheck.json"}
    recs = [{"name": r.name, "ok": r.ok, "detail": r.detail} for r in results]
    outputs["results"].write_text(json.dumps(recs, indent=1, default=float) + "\n", encoding="utf-8")
    failed = [r.name for r in results if not r.ok]
    return {}, outputs, {"checks": names, "failed": failed}


def cmd_rerun(args, cfg, out: Path):
    """Replay a manifest into ``--out`` and compare every output hash."""
    mpath = _need_file(args.manifest, "--manifest")
    manifest = _load(lambda p: json.loads(p.read_text("utf-8")), mpath)
    argv = _retarget(manifest["argv"], str(out))
    prev_env = os.environ.get(CHECK_MODE_ENV)
    prev_cwd = os.getcwd()
    os.environ[CHECK_MODE_ENV] = "1" if manifest.get("check_mode") else "0"
    try:
        os.chdir(manifest.get("cwd", prev_cwd))
        code = main(argv, _quiet=True)
    finally:
        os.chdir(prev_cwd)
        if prev_env is None:
            os.environ.pop(CHECK_MODE_ENV, None)
        else:
            os.environ[CHECK_MODE_ENV] = prev_env
    if code != EXIT_OK:
        raise DataError(f"replayed command exited with {code}")
    replay = json.loads((out / (manifest["command"].replace(" ", "_") + MANIFEST_SUFFIX)).read_text("utf-8"))
    diffs = sorted(k for k, v in manifest["outputs"].items()
                   if replay["outputs"].get(k, {}).get("sha256") != v["sha256"])
    if diffs:
        raise DataError(f"outputs differ from the manifest: {diffs}")
    return {"manifest": mpath}, {}, {"replayed": manifest["command"], "identical": sorted(manifest["outputs"])}


def _retarget(argv: list[str], out: str) -> list[str]:
    res = []
    skip = False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        res.append(a)
    return res + ["--out", out]


# --- parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config with data/model/optim/plan/eval sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory, created if missing (default: current directory)")
    common.add_argument("--exits", help="'all' or a comma list of exit layers")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                        help="dotted config override, e.g. plan.steps=100")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mosekit", description="Multi-exit encoder lab: data, training, evaluation, reports.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus and triplets")
    g.add_argument("--repos", type=int)
    g.add_argument("--triplets", type=int, dest="n_triplets")
    g.add_argument("--dup-rate", type=float)

    d = sub.add_parser("dedup", parents=[common], help="MinHash-LSH near-duplicate removal")
    d.add_argument("--corpus")
    d.add_argument("--triplets")

    t = sub.add_parser("pretrain", parents=[common], help="MLM + ICC pre-training")
    t.add_argument("--corpus", required=True)
    t.add_argument("--ckpt", help="continue from this checkpoint instead of a fresh init")

    f = sub.add_parser("finetune", parents=[common], help="retrieval or clone fine-tuning")
    f.add_argument("task", choices=["retrieval", "clone"])
    f.add_argument("--ckpt")
    f.add_argument("--triplets")
    f.add_argument("--pairs", help="JSON-lines clone pairs {a, b, label}")

    e = sub.add_parser("embed", parents=[common], help="per-exit embeddings of a JSON-lines file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--field", default="text", help="record field to embed (text, nl, code_a, code_b)")

    v = sub.add_parser("eval", parents=[common], help="per-exit retrieval or clone evaluation")
    v.add_argument("task", choices=["retrieval", "clone"])
    v.add_argument("--ckpt", required=True)
    v.add_argument("--triplets")
    v.add_argument("--pairs")
    v.add_argument("--clip-distractors", action="store_true",
                   help="use the whole pool when it is smaller than the distractor count")

    r = sub.add_parser("report", parents=[common], help="trade-off CSV, plot data and figure")
    r.add_argument("--reports", nargs="+")
    r.add_argument("--baseline", nargs="+", help="single-exit baseline reports for deltas")
    r.add_argument("--no-figure", action="store_true")

    m = sub.add_parser("permtest", parents=[common], help="pairwise permutation tests across exits")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--triplets", required=True)
    m.add_argument("--no-figure", action="store_true")

    s = sub.add_parser("selfcheck", parents=[common], help="run the invariant suite")
    s.add_argument("--only", nargs="+", help="subset of check names")

    x = sub.add_parser("rerun", parents=[common], help="replay a run manifest and verify outputs")
    x.add_argument("manifest")
    return p


COMMANDS = {"gen": cmd_gen, "dedup": cmd_dedup, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "embed": cmd_embed, "eval": cmd_eval, "report": cmd_report, "permtest": cmd_permtest,
            "selfcheck": cmd_selfcheck, "rerun": cmd_rerun}


def _flag_overrides(args) -> list[str]:
    extra = []
    if args.command == "gen":
        for flag, key in (("repos", "data.repos"), ("n_triplets", "data.triplets"), ("dup_rate", "data.dup_rate")):
            if getattr(args, flag) is not None:
                extra.append(f"{key}={getattr(args, flag)}")
    return extra


def main(argv=None, _quiet: bool = False) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("mosekit: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(args.threads)
    started = time.time()
    command = args.command + (f" {args.task}" if getattr(args, "task", None) else "")
    try:
        cfg = load_config(args.config, _flag_overrides(args) + args.overrides)
        if args.out:
            out = Path(args.out)
        else:
            out = Path(tempfile.mkdtemp(prefix="mosekit-rerun-") if args.command == "rerun" else ".")
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs, summary = COMMANDS[args.command](args, cfg, out)
    except (UsageError, ConfigError) as e:
        print(f"mosekit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"mosekit: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError) as e:
        print(f"mosekit: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    if args.command != "rerun":
        manifest = write_manifest(out, command, argv, cfg, args.seed, inputs, outputs, started)
        summary["manifest"] = str(manifest)
    summary = {"command": command, "ok": True, "check_mode": check_mode(), **summary}
    if args.command == "selfcheck" and summary["failed"]:
        summary["ok"] = False
    if not _quiet:
        print(json.dumps(summary, sort_keys=True, default=str))
    return EXIT_OK if summary["ok"] else EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
