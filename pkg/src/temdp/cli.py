"""Command-line front end: ``temdp {build-index,privatize,verify,sweep}``.

Exit codes: 0 success (all checks passed), 1 a verification check failed,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import collections
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .embeddings import EmbeddingFormatError, MetricSpace, load_space
from .index import IndexFormatError, build_index, load_index, save_index
from .mechanisms import (
    OOV_POLICIES,
    DROPPED,
    PASSTHROUGH,
    MechanismConfig,
    OOVError,
    PrivacyParams,
    privatize_documents,
    random_source,
)
from .verify import BREAKS, DomainTooLargeError, run_suite

log = logging.getLogger("temdp")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2

# small built-in space for `verify`; includes a pair closer than ln(2)
TOY_SPACE = {
    "cat": (0.0, 0.0), "kitten": (0.3, 0.1), "dog": (1.0, 0.2), "puppy": (1.2, 0.5),
    "car": (4.0, 4.0), "truck": (4.5, 4.2), "apple": (-3.0, 2.0), "pear": (-3.4, 2.3),
}

CONFIG_KEYS = ("embeddings", "mechanism", "epsilon", "gamma", "beta", "seed", "oov",
               "lowercase", "index", "input", "output", "report", "threads", "epsilons",
               "skip_header", "trials", "alpha")

DEFAULTS = {"seed": 0, "oov": "error", "lowercase": False,
            "threads": 1, "skip_header": False, "trials": 10_000, "alpha": 0.01}


class ConfigError(ValueError):
    pass


@dataclass
class CorpusStats:
    """Descriptive corpus statistics.

    ``tokens_unchanged`` counts outputs equal to their input. It describes the
    mechanism's behaviour but is not a privacy measure and does not compare
    mechanisms fairly.
    """

    tokens_total: int = 0
    tokens_in_vocab: int = 0
    tokens_unchanged: int = 0
    distance_sum: float = 0.0
    mechanism: str | None = None
    epsilon: float | None = None
    gamma: float | None = None

    @property
    def mean_output_distance(self) -> float:
        return self.distance_sum / self.tokens_in_vocab if self.tokens_in_vocab else 0.0

    def add(self, other: CorpusStats):
        self.tokens_total += other.tokens_total
        self.tokens_in_vocab += other.tokens_in_vocab
        self.tokens_unchanged += other.tokens_unchanged
        self.distance_sum += other.distance_sum

    def to_dict(self) -> dict:
        d = asdict(self)
        del d["distance_sum"]
        d["mean_output_distance"] = self.mean_output_distance
        return {k: v for k, v in d.items() if v is not None}


# -- configuration ------------------------------------------------------------


def _resolve(args) -> dict:
    """Merge defaults, ``--config`` file and explicit flags (flags win)."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        unknown = set(file_cfg) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg.get("epsilon") is not None and not cfg["epsilon"] > 0:
        raise ConfigError(f"epsilon must be > 0, got {cfg['epsilon']}")
    if cfg.get("threads", 1) < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def _space(cfg) -> MetricSpace:
    path = cfg.get("embeddings")
    if not path:
        raise ConfigError("--embeddings is required")
    try:
        return load_space(path, skip_header=cfg["skip_header"])
    except OSError as e:
        raise ConfigError(f"cannot read embeddings: {e}") from None


def _mech_config(cfg, mechanism=None, epsilon=None) -> MechanismConfig:
    mc = MechanismConfig(mechanism=mechanism or cfg.get("mechanism") or "tem",
                         epsilon=epsilon if epsilon is not None else cfg.get("epsilon"),
                         gamma=cfg.get("gamma"), beta=cfg.get("beta"), seed=int(cfg["seed"]),
                         oov_policy=cfg["oov"])
    if mc.mechanism == "madlib":
        mc.gamma = mc.beta = None
    try:
        return mc.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout
    return open(path, "w", encoding="utf-8", newline="")


# -- privatisation -------------------------------------------------------------------


CHUNK = 256


def _privatize_chunk(lines, first_doc, space, mech, policy, lowercase, seed):
    docs = [line.split() for line in lines]
    keys = [[t.lower() for t in d] for d in docs] if lowercase else docs
    rngs = [random_source(seed, first_doc + j) for j in range(len(docs))]
    out, flags, ids_in, ids_out = privatize_documents(keys, space.vocab, mech, policy, rngs)
    texts = []
    for tokens, words, fl in zip(docs, out, flags):
        # passthrough tokens keep their original spelling
        kept = [tok for tok, f in zip(tokens, fl) if f != DROPPED]
        merged = [tok if f == PASSTHROUGH else w
                  for tok, w, f in zip(kept, words, (f for f in fl if f != DROPPED))]
        texts.append(" ".join(merged))
    stats = CorpusStats(tokens_total=sum(len(d) for d in docs))
    a = np.concatenate(ids_in) if ids_in else np.empty(0, dtype=np.int64)
    if len(a):
        b = np.concatenate(ids_out)
        x = space.vectors
        stats.tokens_in_vocab = len(a)
        stats.tokens_unchanged = int(np.sum(a == b))
        stats.distance_sum = float(np.sqrt(np.square(x[a] - x[b]).sum(axis=1)).sum())
    return texts, stats


def privatize_lines(lines, space, mech, policy="error", lowercase=False, seed=0, threads=1):
    """Privatise one document per line; output order and content do not depend on ``threads``.

    Document ``i`` always draws from ``random_source(seed, i)``; documents are
    batched in chunks only to amortise per-call overhead.
    """
    lines = list(lines)

    def job(first):
        return _privatize_chunk(lines[first:first + CHUNK], first, space, mech, policy,
                                lowercase, seed)

    firsts = range(0, len(lines), CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(job, firsts))
    else:
        results = [job(f) for f in firsts]
    total = CorpusStats()
    texts = []
    for t, s in results:
        texts.extend(t)
        total.add(s)
    return texts, total


def _read_input(cfg) -> list[str]:
    path = cfg.get("input")
    try:
        if path in (None, "-"):
            text = sys.stdin.read()
        else:
            with open(path, encoding="utf-8", newline="") as f:
                text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read input: {e}") from None
    return text.split("\n")


def _load_mech(cfg, space, mc: MechanismConfig):
    index = None
    if mc.mechanism == "tem" and cfg.get("index"):
        try:
            with open(cfg["index"], "rb") as f:
                index = load_index(f, space)
        except OSError as e:
            raise ConfigError(f"cannot read index: {e}") from None
        params = mc.privacy_params(space.size)
        if index.gamma != params.gamma:
            raise ConfigError(f"index built for gamma={index.gamma}, config gives {params.gamma}")
    return mc.build(space, index)


def cmd_privatize(cfg) -> int:
    space = _space(cfg)
    mc = _mech_config(cfg)
    mech = _load_mech(cfg, space, mc)
    lines = _read_input(cfg)
    out_lines, stats = privatize_lines(lines, space, mech, mc.oov_policy, cfg["lowercase"],
                                       mc.seed, cfg["threads"])
    stats.mechanism = mc.mechanism
    stats.epsilon = mc.epsilon
    if mc.mechanism == "tem":
        stats.gamma = mech.params.gamma
    out = _open_out(cfg.get("output"))
    try:
        out.write("\n".join(out_lines))
    finally:
        if out is not sys.stdout:
            out.close()
    report = cfg.get("report")
    if report is None and cfg.get("output") not in (None, "-"):
        report = cfg["output"] + ".stats.json"
    payload = json.dumps(stats.to_dict(), indent=2)
    if report:
        with open(report, "w", encoding="utf-8") as f:
            f.write(payload + "\n")
    else:
        print(payload, file=sys.stderr)
    return EXIT_OK


def cmd_sweep(cfg) -> int:
    epsilons = cfg.get("epsilons")
    if isinstance(epsilons, str):
        epsilons = _float_list(epsilons)
    if not epsilons:
        raise ConfigError("sweep needs at least one epsilon (--epsilons)")
    if any(not e > 0 for e in epsilons):
        raise ConfigError("every epsilon must be > 0")
    mechanisms = cfg.get("mechanism") or ["tem", "madlib"]
    if isinstance(mechanisms, str):
        mechanisms = [mechanisms]
    space = _space(cfg)
    lines = _read_input(cfg)
    rows = []
    for name in mechanisms:
        for eps in epsilons:
            mc = _mech_config(cfg, name, eps)
            mech = mc.build(space)
            _, stats = privatize_lines(lines, space, mech, mc.oov_policy, cfg["lowercase"],
                                       mc.seed, cfg["threads"])
            stats.mechanism, stats.epsilon = name, eps
            if name == "tem":
                stats.gamma = mech.params.gamma
            rows.append(stats.to_dict())
    out_path = cfg.get("output")
    out = _open_out(out_path)
    try:
        if out_path and out_path.endswith(".csv"):
            fields = ["mechanism", "epsilon", "gamma", "tokens_total", "tokens_in_vocab",
                      "tokens_unchanged", "mean_output_distance"]
            writer = csv.DictWriter(out, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        else:
            out.write(json.dumps(rows, indent=2) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_build_index(cfg) -> int:
    space = _space(cfg)
    if cfg.get("gamma") is not None:
        if cfg.get("beta") is not None:
            raise ConfigError("give either --gamma or --beta, not both")
        gamma = float(cfg["gamma"])
        if not gamma >= 0:
            raise ConfigError("gamma must be >= 0")
    else:
        if cfg.get("epsilon") is None or cfg.get("beta") is None:
            raise ConfigError("build-index needs --gamma, or --epsilon with --beta")
        try:
            gamma = PrivacyParams.calibrated(cfg["epsilon"], cfg["beta"], space.size).gamma
        except ValueError as e:
            raise ConfigError(str(e)) from None
    path = cfg.get("index") or cfg.get("output")
    if not path:
        raise ConfigError("build-index needs --index (output path)")
    index = build_index(space, gamma, n_jobs=cfg["threads"])
    with open(path, "wb") as f:
        save_index(index, f)
    hist = collections.Counter(int(s) for s in index.sizes())
    print(f"gamma: {gamma:.6g}")
    print(f"words: {index.vocab_size}")
    print("candidate-list sizes: " + json.dumps({str(k): hist[k] for k in sorted(hist)}))
    return EXIT_OK


def toy_space() -> MetricSpace:
    return MetricSpace.from_arrays(list(TOY_SPACE.values()), list(TOY_SPACE))


def cmd_verify(cfg) -> int:
    space = _space(cfg) if cfg.get("embeddings") else toy_space()
    epsilon = cfg.get("epsilon") or 1.0
    beta = cfg.get("beta") or 0.001
    if not 0 < beta < 1:
        raise ConfigError(f"beta must lie in (0, 1), got {beta}")
    try:
        result = run_suite(space, epsilon, beta, cfg.get("gamma"), int(cfg["seed"]),
                           int(cfg["trials"]), float(cfg["alpha"]), cfg.get("break"))
    except DomainTooLargeError as e:
        raise ConfigError(str(e)) from None
    payload = json.dumps(result, indent=2)
    if cfg.get("report"):
        with open(cfg["report"], "w", encoding="utf-8") as f:
            f.write(payload + "\n")
    else:
        print(payload)
    for check in result["checks"]:
        mark = "PASS" if check["passed"] else "FAIL"
        print(f"{mark} {check['check']} {json.dumps(check['params'])}", file=sys.stderr)
    return EXIT_OK if result["passed"] else EXIT_CHECK_FAILED


# -- argument parsing ----------------------------------------------------------


def _float_list(text):
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="temdp", description="Word-level metric differential privacy: TEM and Madlib.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with the same keys as the flags")
    common.add_argument("--embeddings", help="GloVe-format text file")
    common.add_argument("--skip-header", dest="skip_header", action="store_const", const=True,
                        help="first line is a word2vec 'count dim' header")
    common.add_argument("--epsilon", type=float, help="privacy parameter, > 0")
    common.add_argument("--gamma", type=float, help="TEM truncation threshold")
    common.add_argument("--beta", type=float,
                        help="calibrate gamma so the output stays within gamma w.p. >= 1 - beta")
    common.add_argument("--seed", type=int, help="default 0")
    common.add_argument("--threads", type=int, help="worker threads; output does not depend on it")
    common.add_argument("--report", help="where to write the JSON report")

    corpus = argparse.ArgumentParser(add_help=False)
    corpus.add_argument("--input", help="UTF-8 text, one document per line (default stdin)")
    corpus.add_argument("--output", help="default stdout")
    corpus.add_argument("--oov", choices=OOV_POLICIES)
    corpus.add_argument("--lowercase", action="store_const", const=True,
                        help="lowercase tokens before vocabulary lookup")

    p = sub.add_parser("build-index", parents=[common], help="precompute candidate lists")
    p.add_argument("--index", help="output index path")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("privatize", parents=[common, corpus], help="privatise a corpus")
    p.add_argument("--mechanism", choices=("tem", "madlib"))
    p.add_argument("--index", help="prebuilt index (TEM only)")
    p.set_defaults(func=cmd_privatize)

    p = sub.add_parser("verify", parents=[common], help="run the privacy and utility checks")
    p.add_argument("--trials", type=int, help="Monte Carlo draws per input word")
    p.add_argument("--alpha", type=float, help="Wilson interval significance")
    p.add_argument("--break", dest="break_", choices=BREAKS,
                   help="debug: run the exact check against a deliberately broken oracle")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", parents=[common, corpus], help="corpus statistics per epsilon")
    p.add_argument("--mechanism", action="append", choices=("tem", "madlib"),
                   help="repeatable; default both")
    p.add_argument("--epsilons", type=_float_list, help="comma-separated, e.g. 0.5,1,2,4")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        if getattr(args, "break_", None):
            cfg["break"] = args.break_
        return args.func(cfg)
    except (ConfigError, EmbeddingFormatError, IndexFormatError, OOVError) as e:
        msg = e.args[0] if isinstance(e, OOVError) else str(e)
        print(f"temdp {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
