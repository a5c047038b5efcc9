"""Command-line driver: learn-vocab, pretrain, sft, rl, sample, eval, verify.

Every stage reads one JSON config object (``--config``), applies dotted-key
overrides such as ``--rl.epochs 20``, and writes its artifacts under
``--out``. Stages pick up earlier artifacts from the same directory, so a full
run is the stages invoked in order with the same ``--out``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from .denoiser import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .diffusion import MaskPrior, NoiseSchedule, TransitionModel
from .errors import ConfigError, EmptyCorpus, MotifRLError
from .kernel import Kernel
from .metrics import evaluate_set
from .molgraph import MolGraph, check_validity, from_record, parse_molecule, to_record
from .npe import MotifVocab, encode_corpus, learn_vocab, tokenize
from .oracle import TaskSpec, discrepancy, evaluate, fit_normalization, label, load_registry, tasks_from_obj
from .rl import Condition, PPOConfig, decode_or_none, generate, train_ppo
from .synth import assembly_corpus, smiles_corpus
from .theory import verify
from .training import TrainConfig, split_corpus, train_denoiser

log = logging.getLogger(__name__)

STAGES = ("learn-vocab", "pretrain", "sft", "rl", "sample", "eval", "verify")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    # either a file path (.jsonl records or one SMILES per line) or a generator spec
    "corpus": {"path": None, "format": "auto", "synthetic": {"kind": "assembly", "n": 2000, "seed": 0, "max_rings": 3}},
    # inline task list or a registry file path
    "tasks": [{"name": "ring_count", "kind": "regression", "descriptor": "ring_count", "sigma": 0.5}],
    "vocab": {"V": 40, "R": 4},
    "model": {"n_max": 8, "T": 50, "e_x": 32, "e_e": 16, "e_p": 16, "depth": 2, "heads": 4, "mlp_ratio": 4},
    "pretrain": {"epochs": 50, "batch_size": 64, "lr": 1e-3, "grad_clip": 1.0, "lambda_X": 1.0, "lambda_E": 1.0, "lambda_P": 1.0},
    "sft": {
        "epochs": 100,
        "batch_size": 64,
        "lr": 1e-3,
        "grad_clip": 1.0,
        "lambda_X": 1.0,
        "lambda_E": 1.0,
        "lambda_P": 1.0,
        "eval_every": 10,
        "eval_samples": 64,
    },
    "rl": {
        "clip_eps": 0.2,
        "c_value": 0.5,
        "c_entropy": 0.001,
        "c_kl": 0.01,
        "suffix_steps": 30,
        "batch_size": 32,
        "update_passes": 2,
        "w_val": 0.1,
        "epochs": 200,
        "lr": 1e-4,
        "grad_clip": 1.0,
        "seed": None,  # falls back to the run seed
        "conditions": None,  # list of {"task", "target"}; default: training-split labels
    },
    "sample": {"checkpoint": "rl.ckpt", "n": 500, "conditions": None, "unconditional": False, "batch_size": 100},
    "paths": {
        "vocab": "vocab.json",
        "pretrain": "pretrain.ckpt",
        "sft": "sft.ckpt",
        "rl": "rl.ckpt",
        "rl_log": "rl_log.jsonl",
        "samples": "samples.jsonl",
        "report": "eval.json",
        "report_csv": "eval.csv",
        "verify": "verify.txt",
    },
}

# keys whose values may be replaced wholesale (objects of free shape, lists, or nulls)
_FREE_KEYS = {"tasks", "corpus.synthetic", "rl.conditions", "sample.conditions", "rl.seed", "corpus.path"}


# --------------------------------------------------------------------------
# config


def merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict) and isinstance(value, dict) and path not in _FREE_KEYS:
            out[key] = merge(out[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value: Any) -> dict:
    parts = dotted.split(".")
    update: Any = value
    for p in reversed(parts):
        update = {p: update}
    return merge(cfg, update)


def parse_overrides(extra: Sequence[str]) -> list[tuple[str, Any]]:
    """``--a.b=1`` or ``--a.b 1`` pairs from leftover command-line arguments."""
    out, i = [], 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or len(arg) == 2:
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {arg} has no value")
            raw = extra[i + 1]
            i += 2
        out.append((key, _parse_value(raw)))
    return out


def load_config(path: str | None, overrides: Sequence[tuple[str, Any]] = (), seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a single JSON object")
        cfg = merge(cfg, user)
    for key, value in overrides:
        cfg = apply_override(cfg, key, value)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("seed must be a 64-bit non-negative integer")
    return cfg


# --------------------------------------------------------------------------
# shared inputs


def stage_rng(cfg: dict, stage: str) -> np.random.Generator:
    return np.random.default_rng([cfg["seed"], STAGES.index(stage)])


def read_corpus(cfg: dict) -> list[MolGraph]:
    spec = cfg["corpus"]
    if spec.get("path"):
        path = Path(spec["path"])
        fmt = spec.get("format", "auto")
        if fmt == "auto":
            fmt = "jsonl" if path.suffix in (".jsonl", ".json") else "smiles"
        corpus = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    corpus.append(parse_molecule(line.split()[0] if fmt == "smiles" else line, fmt))
    else:
        syn = spec.get("synthetic") or {}
        kind = syn.get("kind", "assembly")
        if kind == "assembly":
            corpus = assembly_corpus(int(syn.get("n", 2000)), int(syn.get("seed", 0)), int(syn.get("max_rings", 3)))
        elif kind == "smiles":
            corpus = smiles_corpus(int(syn.get("n", 2000)), int(syn.get("seed", 0)))
        else:
            raise ConfigError(f"unknown synthetic corpus kind {kind!r}")
    if not corpus:
        raise EmptyCorpus("corpus is empty")
    return corpus


def read_tasks(cfg: dict, train: Sequence[MolGraph] | None = None) -> list[TaskSpec]:
    spec = cfg["tasks"]
    tasks = load_registry(spec) if isinstance(spec, str) else tasks_from_obj(spec)
    if train is not None:
        tasks = [fit_normalization(t, train) for t in tasks]
    return tasks


class Data:
    """Corpus splits restricted to molecules that fit in ``n_max`` motif slots."""

    def __init__(self, cfg: dict, vocab: MotifVocab):
        n_max = cfg["model"]["n_max"]
        self.splits: dict[str, list[MolGraph]] = {}
        self.states = {}
        dropped = 0
        for name, graphs in split_corpus(read_corpus(cfg)).items():
            kept = [g for g in graphs if tokenize(g, vocab).n_nodes <= n_max]
            dropped += len(graphs) - len(kept)
            self.splits[name] = kept
            self.states[name] = encode_corpus(kept, vocab, n_max)
        if not self.splits["train"]:
            raise EmptyCorpus(f"no training molecule fits in {n_max} motif slots")
        if dropped:
            log.info("dropped %d molecules with more than %d motifs", dropped, n_max)


def _train_config(section: dict) -> TrainConfig:
    keys = TrainConfig.__dataclass_fields__
    return TrainConfig(**{k: v for k, v in section.items() if k in keys})


def _ppo_config(cfg: dict) -> PPOConfig:
    section = dict(cfg["rl"])
    if section.get("seed") is None:
        section["seed"] = cfg["seed"]
    keys = PPOConfig.__dataclass_fields__
    return PPOConfig(**{k: v for k, v in section.items() if k in keys})


def _conditions(spec, fallback: list[Condition]) -> list[Condition]:
    if spec is None:
        return fallback
    return [Condition(int(c["task"]), float(c["target"])) for c in spec]


def _label_conditions(graphs: Sequence[MolGraph], tasks: Sequence[TaskSpec]) -> list[Condition]:
    return [Condition(t.task_id, label(g, t)) for g in graphs for t in tasks]


class Run:
    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = out

    def path(self, key: str) -> Path:
        return self.out / self.cfg["paths"][key]

    def vocab(self) -> MotifVocab:
        return MotifVocab.load(self.path("vocab"))

    def checkpoint(self, key_or_name: str, vocab: MotifVocab):
        p = self.path(key_or_name) if key_or_name in self.cfg["paths"] else self.out / key_or_name
        return load_checkpoint(p, vocab.content_hash())


# --------------------------------------------------------------------------
# stages


def stage_learn_vocab(run: Run) -> dict:
    cfg = run.cfg
    train = split_corpus(read_corpus(cfg))["train"]
    vocab = learn_vocab(train, int(cfg["vocab"]["V"]), int(cfg["vocab"]["R"]))
    vocab.save(run.path("vocab"))
    return {"vocab": str(run.path("vocab")), "units": len(vocab.units), "merges": len(vocab.merges)}


def stage_pretrain(run: Run) -> dict:
    cfg = run.cfg
    vocab = run.vocab()
    data = Data(cfg, vocab)
    train = data.states["train"]
    tasks = read_tasks(cfg, data.splits["train"])
    mcfg = ModelConfig(d_X=vocab.d_X, d_P=vocab.d_P, **cfg["model"])
    schedule = NoiseSchedule(mcfg.T)
    transitions = TransitionModel.fit(train, vocab.d_X, vocab.d_P)
    prior = MaskPrior.fit(train, mcfg.n_max)
    model = build_model(mcfg, tasks, seed=cfg["seed"])
    tcfg = _train_config(cfg["pretrain"])
    hist = train_denoiser(model, Kernel(schedule, transitions), train, tcfg, stage_rng(cfg, "pretrain"))
    meta = {"stage": "pretrain", "epochs": tcfg.epochs, "n_train": len(train)}
    save_checkpoint(run.path("pretrain"), model, schedule, transitions, prior, vocab.content_hash(), meta)
    return {"checkpoint": str(run.path("pretrain")), "final_loss": hist["loss"][-1] if hist["loss"] else None}


def controllability(model, kernel, prior, vocab, conditions, rng) -> float:
    """Mean validation discrepancy; invalid samples count as the worst shaped outcome."""
    z, _, _ = generate(model, kernel, prior, conditions, rng)
    scores = []
    for state, c in zip(z.states(), conditions):
        g = decode_or_none(state, vocab)
        task = model.task(c.task)
        if g is None or not check_validity(g).is_valid:
            scores.append(1.0 if task.kind != "regression" else 3.0 * task.sigma)
        else:
            scores.append(discrepancy(evaluate(g, task), c.target, task))
    return float(np.mean(scores))


def stage_sft(run: Run) -> dict:
    cfg = run.cfg
    vocab = run.vocab()
    ck = run.checkpoint("pretrain", vocab)
    data = Data(cfg, vocab)
    model, kernel = ck.model, Kernel(ck.schedule, ck.transitions)
    tasks = model.tasks
    pairs = [(z, c) for g, z in zip(data.splits["train"], data.states["train"]) for c in _label_conditions([g], tasks)]
    states = [z for z, _ in pairs]
    conds = [(c.task, c.target) for _, c in pairs]
    tcfg = _train_config(cfg["sft"])
    n_eval = int(cfg["sft"]["eval_samples"])
    val_conds = _label_conditions(data.splits["val"] or data.splits["train"], tasks)
    pick = stage_rng(cfg, "sft").permutation(len(val_conds))[:n_eval]
    val_conds = [val_conds[int(i)] for i in sorted(pick)]
    eval_seed = int(cfg["seed"])

    def score(m):
        # same noise for every evaluation so checkpoints are compared on equal footing
        return controllability(m, kernel, ck.mask_prior, vocab, val_conds, np.random.default_rng([eval_seed, 99]))

    hist = train_denoiser(model, kernel, states, tcfg, stage_rng(cfg, "sft"), conditions=conds, evaluate=score)
    meta = {"stage": "sft", "epochs": tcfg.epochs, "n_pairs": len(pairs), "selection": hist["eval"]}
    save_checkpoint(run.path("sft"), model, ck.schedule, ck.transitions, ck.mask_prior, vocab.content_hash(), meta)
    return {"checkpoint": str(run.path("sft")), "selection": hist["eval"]}


def stage_rl(run: Run, log_fn: Callable[[dict], None] | None = None) -> dict:
    cfg = run.cfg
    torch.manual_seed(cfg["seed"])
    vocab = run.vocab()
    ck = run.checkpoint("sft", vocab)
    model = ck.model
    fallback = None
    if cfg["rl"]["conditions"] is None:
        data = Data(cfg, vocab)
        fallback = _label_conditions(data.splits["train"], model.tasks)
    pool = _conditions(cfg["rl"]["conditions"], fallback)
    pcfg = _ppo_config(cfg)
    rows = []
    with open(run.path("rl_log"), "w", encoding="utf-8") as fh:

        def write(row):
            rows.append(row)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            if log_fn is not None:
                log_fn(row)

        train_ppo(model, Kernel(ck.schedule, ck.transitions), ck.mask_prior, pool, model.tasks, vocab, pcfg, log_fn=write)
    meta = {"stage": "rl", "epochs": pcfg.epochs}
    save_checkpoint(run.path("rl"), model, ck.schedule, ck.transitions, ck.mask_prior, vocab.content_hash(), meta)
    return {"checkpoint": str(run.path("rl")), "log": str(run.path("rl_log")), "epochs": len(rows)}


def stage_sample(run: Run) -> dict:
    cfg = run.cfg
    sc = cfg["sample"]
    torch.manual_seed(cfg["seed"])
    vocab = run.vocab()
    ck = run.checkpoint(sc["checkpoint"], vocab)
    model, kernel = ck.model, Kernel(ck.schedule, ck.transitions)
    n = int(sc["n"])
    if sc["unconditional"]:
        conds: list[Condition | None] = [None] * n
    else:
        if sc["conditions"] is None:
            data = Data(cfg, vocab)
            base = _label_conditions(data.splits["test"] or data.splits["train"], model.tasks)
        else:
            base = _conditions(sc["conditions"], [])
        if not base:
            raise ConfigError("no sampling conditions")
        conds = [base[i % len(base)] for i in range(n)]
    rng = stage_rng(cfg, "sample")
    bs = int(sc["batch_size"])
    lines, n_valid = [], 0
    for start in range(0, n, bs):
        chunk = conds[start : start + bs]
        if sc["unconditional"]:
            z, _, _ = generate(model, kernel, ck.mask_prior, None, rng, n=len(chunk))
        else:
            z, _, _ = generate(model, kernel, ck.mask_prior, chunk, rng)
        for state, c in zip(z.states(), chunk):
            g = decode_or_none(state, vocab)
            ok = g is not None and check_validity(g).is_valid
            n_valid += ok
            rec = {
                "condition": None if c is None else {"task": c.task, "target": c.target},
                "molecule": None if g is None else to_record(g),
                "valid": bool(ok),
            }
            lines.append(json.dumps(rec, sort_keys=True))
    run.path("samples").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"samples": str(run.path("samples")), "n": n, "validity": n_valid / max(n, 1)}


def read_samples(path: Path) -> tuple[list[MolGraph | None], list[Condition | None]]:
    gens, conds = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            gens.append(None if rec["molecule"] is None else from_record(rec["molecule"]))
            c = rec["condition"]
            conds.append(None if c is None else Condition(int(c["task"]), float(c["target"])))
    return gens, conds


def stage_eval(run: Run) -> dict:
    cfg = run.cfg
    vocab = run.vocab()
    ck = run.checkpoint(cfg["sample"]["checkpoint"], vocab)
    gens, conds = read_samples(run.path("samples"))
    data = Data(cfg, vocab)
    conditional = all(c is not None for c in conds)
    report = evaluate_set(
        gens,
        data.splits["test"] or data.splits["train"],
        conds if conditional else None,
        ck.model.tasks if conditional else (),
        training=data.splits["train"],
    )
    run.path("report").write_text(report.to_json(), encoding="utf-8")
    run.path("report_csv").write_text(report.to_csv(), encoding="utf-8")
    return report.to_dict()


def stage_verify(run: Run) -> dict:
    ok, table = verify(run.cfg["seed"])
    run.path("verify").write_text(table + "\n", encoding="utf-8")
    print(table)
    return {"passed": ok}


STAGE_FUNCTIONS: dict[str, Callable[[Run], dict]] = {
    "learn-vocab": stage_learn_vocab,
    "pretrain": stage_pretrain,
    "sft": stage_sft,
    "rl": stage_rl,
    "sample": stage_sample,
    "eval": stage_eval,
    "verify": stage_verify,
}


def run_stage(stage: str, cfg: dict, out: Path | str) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(int(cfg["threads"]))
    return STAGE_FUNCTIONS[stage](Run(cfg, out))


def run_pipeline(cfg: dict, out: Path | str, stages: Sequence[str] = STAGES[:-2]) -> dict:
    """Run several stages in order with one config; returns each stage's summary."""
    return {s: run_stage(s, cfg, out) for s in stages}


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motifrl", description=__doc__.splitlines()[0])
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", help="JSON config file (one object)")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", default="out", help="artifact directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(category: str, exc: BaseException) -> int:
    message = " ".join(str(exc).split())
    print(f"error: {category}: {message}", file=sys.stderr)
    return 2


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, parse_overrides(extra), args.seed)
        print(f"seed: {cfg['seed']}")
        print("config: " + json.dumps(cfg, sort_keys=True))
        summary = run_stage(args.stage, cfg, args.out)
    except MotifRLError as exc:
        return _fail(exc.category, exc)
    except FileNotFoundError as exc:
        return _fail("FileNotFound", exc)
    except (OSError, ValueError, TypeError, KeyError) as exc:
        return _fail(type(exc).__name__, exc)
    if args.stage != "verify":
        print(json.dumps(summary, sort_keys=True, default=str))
    if args.stage == "verify" and not summary["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
