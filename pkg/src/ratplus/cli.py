"""Command-line entry point: ``ratplus <command> [--config FILE] [--section.field=value ...]``."""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import equiv
from .container import ContainerError
from .cost import OperatorDims, bench_operator, cost_rows, emit_report, machine_note
from .data import synth_task_generate
from .model import ModelConfig, RatPlusModel
from .numerics import NumericError, Rng
from .patterns import SparsePatternSpec
from .training import TrainSpec, adapt, eval_ppl, train

log = logging.getLogger("ratplus")

OUTPUT_ENV = "RATPLUS_OUTPUT_DIR"
EXIT_OK, EXIT_INVALID, EXIT_ORACLE, EXIT_RUNTIME = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _spec(D, **kw) -> dict:
    return SparsePatternSpec(D, **kw).to_dict()


def default_config() -> dict:
    model = ModelConfig().to_dict()
    model.update(ffn_dim=None, patterns=None, seed=None)
    train_d = TrainSpec(steps=300).to_dict()
    train_d["seed"] = None
    return {
        "seed": 0,
        "output_dir": None,
        "checkpoint": None,
        "model": model,
        "train": train_d,
        "corpus": {"kind": "LAG", "size": 80000, "seed": 1, "vocab": 16, "lag": 3, "span": 8,
                   "copy_lag": 0, "copy_prob": 0.0, "pairs": 2, "path": None, "split": 0.9},
        "pattern": _spec(4),
        "eval_specs": [_spec(D, sinks=0) for D in (1, 2, 4, 8)],
        "eval": {"max_windows": 16, "batch": 16},
        "adapt": {"lr": 1e-4, "tokens_budget": 204800, "batch": 8, "eval_every": 10},
        "bench": {"specs": [_spec(1), _spec(16)], "T": [256, 1024, 4096], "repeats": 5,
                  "heads": 8, "head_dim": 64, "model_dim": 512, "prefill": False},
        "cost": {"specs": [_spec(D, sinks=0) for D in (1, 2, 4, 8, 16, 32, 64)], "T": 4096,
                 "heads": 8, "head_dim": 64, "model_dim": 512},
        "decode": {"prompt_tokens": 32, "new_tokens": 64, "sample": False},
    }


# config handling ---------------------------------------------------------

def _merge(base, update, path=""):
    """Recursively overlay ``update`` on ``base``; keys absent from ``base`` are errors."""
    if not isinstance(update, dict) or not isinstance(base, dict):
        return copy.deepcopy(update)
    out = dict(base)
    for k, v in update.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key '{where}'")
        out[k] = _merge(base[k], v, where) if isinstance(base[k], dict) else copy.deepcopy(v)
    return out


def load_config_file(path) -> dict:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1:1: top level must be an object")
    data.pop("config_hash", None)
    return data


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(cfg: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for i, k in enumerate(keys[:-1]):
        where = ".".join(keys[:i + 1])
        if isinstance(node, list):
            if not k.isdigit() or int(k) >= len(node):
                raise ConfigError(f"override '{dotted}': bad list index at '{where}'")
            node = node[int(k)]
        elif isinstance(node, dict) and k in node and isinstance(node[k], (dict, list)):
            node = node[k]
        else:
            raise ConfigError(f"override '{dotted}': unknown config key '{where}'")
    last = keys[-1]
    if isinstance(node, list):
        if not last.isdigit() or int(last) >= len(node):
            raise ConfigError(f"override '{dotted}': bad list index")
        node[int(last)] = _parse_value(raw)
    elif isinstance(node, dict) and last in node:
        node[last] = _parse_value(raw)
    else:
        raise ConfigError(f"override '{dotted}': unknown config key '{dotted}'")


def split_overrides(extra: list) -> list:
    """``['--a.b=1', '--c.d', '2']`` -> ``[('a.b', '1'), ('c.d', '2')]``."""
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            k, v = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok!r} needs a value")
            k, v = body, extra[i + 1]
            i += 2
        pairs.append((k, v))
    return pairs


def config_hash(cfg: dict) -> str:
    payload = {k: v for k, v in cfg.items() if k not in ("output_dir", "config_hash")}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def resolve_config(config_path, overrides) -> dict:
    cfg = default_config()
    if config_path:
        cfg = _merge(cfg, load_config_file(config_path))
    for k, v in overrides:
        apply_override(cfg, k, v)
    if cfg["model"].get("seed") is None:
        cfg["model"]["seed"] = cfg["seed"]
    if cfg["train"].get("seed") is None:
        cfg["train"]["seed"] = cfg["seed"]
    if cfg["output_dir"] is None:
        cfg["output_dir"] = os.environ.get(OUTPUT_ENV, "runs")
    return cfg


def _field(name, fn, *args):
    try:
        return fn(*args)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"field '{name}': {e}") from None


def build_model_config(cfg) -> ModelConfig:
    return _field("model", ModelConfig.from_dict, cfg["model"])


def build_train_spec(cfg) -> TrainSpec:
    return _field("train", TrainSpec.from_dict, cfg["train"])


def build_specs(cfg, key) -> list:
    specs = cfg[key] if isinstance(cfg[key], list) else [cfg[key]]
    return [_field(f"{key}[{i}]", SparsePatternSpec.from_dict, s) for i, s in enumerate(specs)]


def build_corpus(cfg):
    c = cfg["corpus"]
    path = c.get("path")
    if path is not None and not Path(path).exists():
        raise ConfigError(f"field 'corpus.path': {path} does not exist")
    corpus = _field("corpus", lambda: synth_task_generate(
        c["kind"], c["size"], c["seed"], vocab=c["vocab"], span=c["span"], lag=c["lag"],
        copy_lag=c["copy_lag"], copy_prob=c["copy_prob"], pairs=c["pairs"], path=path))
    return corpus.split(c["split"])


def validate(cfg, command) -> None:
    build_model_config(cfg)
    build_train_spec(cfg)
    if not cfg["eval_specs"]:
        raise ConfigError("field 'eval_specs': must be nonempty")
    for key in ("eval_specs", "pattern"):
        build_specs(cfg, key)
    if command in ("adapt", "eval", "decode-demo") and not cfg["checkpoint"]:
        raise ConfigError(f"field 'checkpoint': required by {command}")
    if cfg["checkpoint"] and not Path(cfg["checkpoint"]).exists():
        raise ConfigError(f"field 'checkpoint': {cfg['checkpoint']} does not exist")
    path = cfg["corpus"].get("path")
    if path is not None and not Path(path).exists():
        raise ConfigError(f"field 'corpus.path': {path} does not exist")


# artifacts -----------------------------------------------------------------

class Run:
    def __init__(self, cfg: dict, command: str):
        self.cfg = cfg
        self.command = command
        self.hash = config_hash(cfg)
        self.seed = cfg["seed"]
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        eff = dict(cfg, config_hash=self.hash)
        (self.out / f"{command}.config.json").write_text(json.dumps(eff, indent=2, sort_keys=True) + "\n")

    @property
    def meta(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "command": self.command}

    def path(self, name) -> Path:
        return self.out / name

    def write_text(self, name, text: str, comment: str = "#") -> Path:
        p = self.path(name)
        head = "".join(f"{comment} {k}: {v}\n" for k, v in sorted(self.meta.items()))
        p.write_text(head + text)
        return p


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _ppl_table(model, held, specs, cfg) -> tuple[str, str]:
    rows = []
    for spec in specs:
        ppl = eval_ppl(model, held, spec, batch=cfg["eval"]["batch"], max_windows=cfg["eval"]["max_windows"])
        rows.append((spec.label(), ppl))
        log.info("ppl %-24s %.6f", spec.label(), ppl)
    csv_text = _csv_text(["pattern", "ppl"], [(lab, repr(ppl)) for lab, ppl in rows])
    base = rows[0][1]
    md = "| pattern | ppl | ratio |\n|---|---|---|\n" + "".join(
        f"| {lab} | {ppl:.4f} | {ppl / base:.3f} |\n" for lab, ppl in rows)
    return csv_text, md


def cmd_train(cfg, run: Run) -> int:
    mc = build_model_config(cfg)
    ts = build_train_spec(cfg)
    tr, held = build_corpus(cfg)
    model = RatPlusModel(mc)
    log.info("train %s: %d params, %d steps, mode %s", run.hash, model.num_params(), ts.steps, ts.mode)
    t0 = time.time()

    def progress(step, row):
        if (step + 1) % 25 == 0 or step + 1 == ts.steps:
            log.info("step %d/%d %s loss %.4f lr %.2e (%.0fs)", step + 1, ts.steps, row.pattern, row.loss,
                     row.lr, time.time() - t0)

    model, trace = train(model, tr, ts, progress=progress)
    model.save(run.path("model.rmx"), extra=run.meta)
    trace.write_csv(run.path("loss.csv"), run.meta)
    csv_text, md = _ppl_table(model, held, build_specs(cfg, "eval_specs"), cfg)
    run.write_text("ppl.csv", csv_text)
    run.write_text("ppl.md", md, comment="<!--")
    print(md, end="")
    return EXIT_OK


def _load(cfg) -> RatPlusModel:
    return RatPlusModel.load(cfg["checkpoint"])


def cmd_adapt(cfg, run: Run) -> int:
    model = _load(cfg)
    tr, held = build_corpus(cfg)
    (target,) = build_specs(cfg, "pattern")
    a = cfg["adapt"]
    before = eval_ppl(model, held, target, max_windows=cfg["eval"]["max_windows"])
    res = adapt(model, tr, target, a["lr"], a["tokens_budget"], batch=a["batch"], seed=cfg["seed"],
                eval_corpus=held, eval_every=a["eval_every"], eval_windows=cfg["eval"]["max_windows"])
    after = eval_ppl(res.model, held, target, max_windows=cfg["eval"]["max_windows"])
    log.info("adapt to %s: ppl %.4f -> %.4f over %d steps", target.label(), before, after, len(res.trace.rows))
    res.model.save(run.path("adapted.rmx"), extra=dict(run.meta, target=target.to_dict()))
    res.trace.write_csv(run.path("adapt_loss.csv"), run.meta)
    curve = _csv_text(["tokens", "eval_loss"], [(t, repr(l)) for t, l in zip(res.eval_tokens, res.eval_loss)])
    run.write_text("adapt_eval.csv", curve)
    run.write_text("adapt_ppl.csv", _csv_text(["pattern", "ppl_before", "ppl_after"],
                                              [(target.label(), repr(before), repr(after))]))
    print(f"{target.label()}: ppl {before:.4f} -> {after:.4f}")
    return EXIT_OK


def cmd_eval(cfg, run: Run) -> int:
    model = _load(cfg)
    _, held = build_corpus(cfg)
    csv_text, md = _ppl_table(model, held, build_specs(cfg, "eval_specs"), cfg)
    run.write_text("ppl.csv", csv_text)
    run.write_text("ppl.md", md, comment="<!--")
    print(md, end="")
    return EXIT_OK


def _dims(section) -> OperatorDims:
    return OperatorDims(section["heads"], section["head_dim"], section["model_dim"])


def cmd_cost(cfg, run: Run) -> int:
    c = cfg["cost"]
    rows = cost_rows(build_specs(cfg["cost"], "specs"), c["T"], _dims(c))
    meta = dict(run.meta, storage="f32", machine=machine_note())
    _, md = emit_report(rows, run.path("cost.csv"), meta)
    run.write_text("cost.md", md, comment="<!--")
    print(md, end="")
    return EXIT_OK


def cmd_bench(cfg, run: Run) -> int:
    b = cfg["bench"]
    dims = _dims(b)
    rows, detail = [], []
    for spec in build_specs(b, "specs"):
        for T in b["T"]:
            res = bench_operator(spec, T, dims, b["repeats"], seed=cfg["seed"], prefill=b["prefill"])
            (row,) = cost_rows([spec], T, dims)
            row.measured_ns = res.decode_median
            rows.append(row)
            pm = res._stats(res.prefill_ns)
            detail.append((spec.label(), T, pm[0] or "", pm[1] or "", res.decode_median, res.decode_min))
            log.info("bench %-12s T=%-6d decode median %d ns", spec.label(), T, res.decode_median)
    meta = dict(run.meta, storage="f32", machine=machine_note(), measured="decode-step median ns")
    _, md = emit_report(rows, run.path("bench.csv"), meta)
    run.write_text("bench_detail.csv", _csv_text(["pattern", "T", "prefill_median_ns", "prefill_min_ns",
                                                 "decode_median_ns", "decode_min_ns"], detail))
    run.write_text("bench.md", md, comment="<!--")
    print(md, end="")
    return EXIT_OK


def cmd_decode_demo(cfg, run: Run) -> int:
    model = _load(cfg)
    _, held = build_corpus(cfg)
    (spec,) = build_specs(cfg, "pattern")
    d = cfg["decode"]
    room = model.config.context_length - d["new_tokens"]
    n_prompt = max(1, min(d["prompt_tokens"], room, len(held) - 1))
    prompt = held.tokens[:n_prompt]
    logits, session = model.start_decode(prompt, spec)
    rng = Rng(cfg["seed"])
    lines = []
    for _ in range(d["new_tokens"]):
        if session.t + 1 >= model.config.context_length:
            break
        if d["sample"]:
            p = np.exp(logits - logits.max())
            tok = int(rng.choice(len(p), p=p / p.sum()))
        else:
            tok = int(np.argmax(logits))
        logits = session.step(tok)
        fp = session.footprint()
        line = f"t={session.t} token={tok} cache_entries={fp['entries']} cache_bytes={fp['bytes']}"
        print(line, flush=True)
        lines.append(line)
    run.write_text("decode.log", "\n".join(lines) + "\n")
    return EXIT_OK


def _parse_sizes(raw: str) -> tuple:
    raw = raw.strip()
    if raw.upper().startswith("T="):
        raw = raw[2:]
    try:
        sizes = tuple(int(s) for s in raw.split(",") if s)
    except ValueError:
        raise ConfigError(f"bad --sizes {raw!r}") from None
    if not sizes or min(sizes) < 1:
        raise ConfigError("--sizes must list positive integers")
    return sizes


def cmd_equiv(args) -> int:
    sizes = _parse_sizes(args.sizes) if args.sizes else equiv.DEFAULT_SIZES
    if args.inject_fault and args.inject_fault not in equiv.FAULTS:
        raise ConfigError(f"unknown fault {args.inject_fault!r}; known: {', '.join(equiv.FAULTS)}")
    results = equiv.run_suite(args.seed, sizes, args.inject_fault, log=print)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"failure: module={r.module} case={r.case!r} max_error={r.max_error:.3g}", file=sys.stderr)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_ORACLE if failed else EXIT_OK


COMMANDS = {"train": cmd_train, "adapt": cmd_adapt, "eval": cmd_eval, "bench": cmd_bench,
            "cost": cmd_cost, "decode-demo": cmd_decode_demo}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ratplus", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    e = sub.add_parser("equiv", help="run the oracle suite")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--sizes", help="sequence lengths, e.g. 'T=1' or '1,2,31'")
    e.add_argument("--inject-fault", choices=None, help="corrupt a component (negative control): scan")
    for name in COMMANDS:
        s = sub.add_parser(name, help=f"{name} (config-driven)")
        s.add_argument("--config", help="JSON config file (keys overlay the defaults)")
        s.add_argument("--show-config", action="store_true", help="print the effective config and exit")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "equiv":
            if extra:
                raise ConfigError(f"unexpected arguments {extra}")
            return cmd_equiv(args)
        if args.config and not Path(args.config).exists():
            raise ConfigError(f"config file {args.config} does not exist")
        cfg = resolve_config(args.config, split_overrides(extra))
        validate(cfg, args.command)
        if args.show_config:
            print(json.dumps(dict(cfg, config_hash=config_hash(cfg)), indent=2, sort_keys=True))
            return EXIT_OK
        run = Run(cfg, args.command)
    except (ConfigError, ContainerError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](cfg, run)
    except (ConfigError, ContainerError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericError, ArithmeticError, OSError, ValueError, RuntimeError) as e:
        print(f"runtime fault: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
