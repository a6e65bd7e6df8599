"""``billiards`` command line: one subcommand per pipeline step.

Settings come from flags, then the JSON file given by ``--config`` (a section per
subcommand, e.g. ``{"train-bl2vec": {"epochs": 50}}``), then built-in defaults.
Every run writes a manifest (argv, resolved options, input/output digests) next to
its main output, so a run can be replayed exactly.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__

DATA_DIR_ENV = "BILLIARDS_DATA_DIR"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("billiards")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Per-invocation bookkeeping: path resolution and the manifest."""

    def __init__(self, args, argv: List[str]):
        self.args = args
        self.argv = argv
        self.data_dir = Path(args.data_dir) if args.data_dir else None
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.main_output: Optional[Path] = None
        self.extra: Dict = {}

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_absolute() and not p.exists() and self.data_dir is not None:
            p = self.data_dir / p
        if not p.exists():
            raise DataError(f"input not found: {path}")
        self.inputs[str(p)] = sha256_file(p)
        return p

    def output(self, path, main: bool = True) -> Path:
        p = Path(path)
        if p.parent and not p.parent.exists():
            p.parent.mkdir(parents=True, exist_ok=True)
        if main and self.main_output is None:
            self.main_output = p
        self.outputs[str(p)] = ""
        return p

    def write_manifest(self) -> Path:
        for p in list(self.outputs):
            if Path(p).exists():
                self.outputs[p] = sha256_file(p)
        if self.args.manifest:
            path = Path(self.args.manifest)
        elif self.main_output is not None:
            path = self.main_output.with_name(self.main_output.name + ".manifest.json")
        else:
            stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
            base = self.data_dir if self.data_dir is not None else Path(".")
            path = base / ".billiards" / "manifests" / f"{self.args.command}-{stamp}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        opts = {k: v for k, v in vars(self.args).items() if k not in ("func", "manifest")}
        manifest = {
            "subcommand": self.args.command,
            "argv": self.argv,
            "config": self.args.config,
            "seed": getattr(self.args, "seed", None),
            "options": opts,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "version": __version__,
        }
        manifest.update(self.extra)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path


def _emit(rows, out: Optional[Path]):
    text = "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in rows)
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


def _geom(args):
    from .core import TableGeometry

    return TableGeometry()


def _featurizer(args):
    from .core import GameSpec, TableGeometry
    from .pipeline import Featurizer
    from .tokens import TokenConfig

    return Featurizer(TableGeometry(), GameSpec(), TokenConfig(args.cell_size, args.angle_step, args.distance_step))


def _read(run: Run, path):
    from .core import read_layouts

    return read_layouts(run.input(path))


def _load_ckpt(run: Run, path):
    from .checkpoint import Checkpoint

    return Checkpoint.load(run.input(path))


def _save_ckpt(run: Run, ckpt, path, main=True) -> str:
    digest = ckpt.save(run.output(path, main))
    return digest


def _net_cfg(args):
    from .nn import NetConfig

    return NetConfig(embed_dim=args.embed_dim, filters_total=args.filters, l2_lambda=args.l2,
                     learning_rate=args.lr, seed=args.seed)


def _check_featurizer(run: Run, model_fz, args):
    """Refuse tokenisation flags that disagree with a checkpoint's stored settings."""
    given = {k: getattr(args, k) for k in ("cell_size", "angle_step", "distance_step") if getattr(args, k, None) is not None}
    if given:
        stored = {"cell_size": model_fz.tokens.cell_size, "angle_step": model_fz.tokens.angle_granularity,
                  "distance_step": model_fz.tokens.distance_granularity}
        for k, v in given.items():
            if float(v) != float(stored[k]):
                from .checkpoint import CheckpointError

                raise CheckpointError(f"--{k.replace('_', '-')} {v} differs from the checkpoint's {stored[k]}; "
                                      "refusing to re-tokenise")


# --------------------------------------------------------------------------- subcommands


def cmd_synth(run: Run, a):
    from .core import write_layouts
    from .synth import SynthConfig, generate_synthetic

    cfg = SynthConfig(count=a.count, seed=a.seed, clear_weight_vector=tuple(a.weights),
                      min_object_balls=a.min_balls, max_object_balls=a.max_balls, label_noise=a.label_noise)
    write_layouts(generate_synthetic(cfg), str(run.output(a.output)))


def cmd_validate(run: Run, a):
    from .core import validate_layout

    layouts = _read(run, a.layouts)
    rows = [{"id": l.id, "problems": validate_layout(l, _geom(a))} for l in layouts]
    _emit(rows, run.output(a.output) if a.output else None)
    bad = sum(1 for r in rows if r["problems"])
    run.extra["invalid"] = bad
    if bad:
        raise DataError(f"{bad} of {len(rows)} layouts are invalid")


def cmd_features(run: Run, a):
    from .features import extract_features

    rows = []
    for l in _read(run, a.layouts):
        ft = extract_features(l, _geom(a))
        rows.append({"id": l.id, "balls": ft.to_records()})
    _emit(rows, run.output(a.output) if a.output else None)


def cmd_tokenize(run: Run, a):
    fz = _featurizer(a)
    layouts = _read(run, a.layouts)
    toks = fz.token_ids(layouts)
    rows = []
    for l, t in zip(layouts, toks):
        rows.append({"id": l.id, "tokens": {str(b.number): t[b.number].tolist() for b in l.canonical().balls}})
    _emit(rows, run.output(a.output) if a.output else None)


def cmd_train_bl2vec(run: Run, a):
    from .bl2vec import PerturbConfig, TripletConfig, train_bl2vec

    cfg = TripletConfig(margin=a.margin, positive=PerturbConfig(a.pos_noise, a.pos_drop),
                        negative=PerturbConfig(a.neg_noise, a.neg_drop), epochs=a.epochs, batch_size=a.batch_size,
                        val_fraction=a.val_fraction, eval_every=a.eval_every, patience=a.patience, seed=a.seed)
    model = train_bl2vec(_read(run, a.layouts), cfg, _net_cfg(a), _featurizer(a), max_steps=a.max_steps)
    run.extra["checkpoint_sha256"] = _save_ckpt(run, model.to_checkpoint(), a.output)
    run.extra["metrics"] = {"best_val_loss": model.curves.get("best")}


def cmd_train_blcnn(run: Run, a):
    from .blcnn import FitConfig, TaskSpec, train_blcnn

    fit = FitConfig(epochs=a.epochs, batch_size=a.batch_size, val_fraction=a.val_fraction, eval_every=a.eval_every,
                    patience=a.patience, seed=a.seed)
    model = train_blcnn(_read(run, a.layouts), TaskSpec(a.task), _net_cfg(a), _featurizer(a), fit, max_steps=a.max_steps)
    run.extra["checkpoint_sha256"] = _save_ckpt(run, model.to_checkpoint(), a.output)
    run.extra["metrics"] = {"best_val_loss": model.curves.get("best")}


def cmd_train_blgan(run: Run, a):
    from .blcnn import BLCNN
    from .blgan import GANConfig, GeneratorConfig, train_blgan
    from .nn import NetConfig

    scorer = BLCNN.from_checkpoint(_load_ckpt(run, a.scorer))
    _check_featurizer(run, scorer.featurizer, a)
    layouts = [l for l in _read(run, a.layouts) if l.labels is not None and l.labels.clear]
    if len(layouts) < 2:
        raise DataError("need at least two clear-labelled layouts")
    cfg = GANConfig(steps=a.steps, episodes=a.episodes, gen_lr=a.gen_lr, disc_lr=a.disc_lr, seed=a.seed,
                    log_every=a.log_every, generator=GeneratorConfig(hidden=a.hidden, seed=a.seed))
    net = NetConfig(embed_dim=scorer.net.embed_dim, filters_total=scorer.net.filters_total, l2_lambda=a.l2,
                    learning_rate=a.disc_lr, seed=a.seed)
    model = train_blgan(layouts, scorer, cfg, net)
    gen_ck, disc_ck = model.to_checkpoints()
    run.extra["checkpoint_sha256"] = _save_ckpt(run, gen_ck, a.output)
    disc_path = a.disc_output or str(Path(a.output).with_suffix(".disc.ckpt"))
    run.extra["discriminator_sha256"] = _save_ckpt(run, disc_ck, disc_path, main=False)


def _bl2vec_model(run: Run, path, a=None):
    from .bl2vec import BL2Vec

    model = BL2Vec.from_checkpoint(_load_ckpt(run, path))
    if a is not None:
        _check_featurizer(run, model.featurizer, a)
    return model


def cmd_embed(run: Run, a):
    model = _bl2vec_model(run, a.checkpoint, a)
    layouts = _read(run, a.layouts)
    vecs = model.embed(layouts)
    if a.output and a.output.endswith(".npy"):
        np.save(run.output(a.output), vecs)
        _emit([{"id": l.id, "row": i} for i, l in enumerate(layouts)], run.output(a.output + ".ids", main=False))
    else:
        _emit([{"id": l.id, "vector": [float(x) for x in v]} for l, v in zip(layouts, vecs)],
              run.output(a.output) if a.output else None)


def cmd_index(run: Run, a):
    from .bl2vec import RetrievalIndex

    model = _bl2vec_model(run, a.checkpoint, a)
    ckpt_path = run.input(a.checkpoint)
    index = RetrievalIndex.build(model, _read(run, a.layouts), checkpoint_digest=run.inputs[str(ckpt_path)],
                                 checkpoint_path=str(ckpt_path.resolve()))
    run.extra["index_sha256"] = _save_ckpt(run, index.to_checkpoint(), a.output)


def cmd_query(run: Run, a):
    from .bl2vec import RetrievalIndex
    from .checkpoint import CheckpointError

    index = RetrievalIndex.from_checkpoint(_load_ckpt(run, a.index))
    ckpt = a.checkpoint or index.checkpoint_path
    if not ckpt:
        raise DataError("index does not record its checkpoint; pass --checkpoint")
    model = _bl2vec_model(run, ckpt, a)
    digest = run.inputs[str(run.input(ckpt))]
    if index.checkpoint_digest and digest != index.checkpoint_digest:
        raise CheckpointError("checkpoint does not match the one the index was built with")
    rows = []
    queries = _read(run, a.layout)
    for q, v in zip(queries, model.embed(queries)):
        for rank, (lid, dist) in enumerate(index.knn(v, a.k), start=1):
            rows.append({"query": q.id, "rank": rank, "id": lid, "distance": dist})
    _emit(rows, run.output(a.output) if a.output else None)


def cmd_distance(run: Run, a):
    from .baselines import distance_matrix

    A = _read(run, a.a)
    B = _read(run, a.b)
    if a.measure == "bl2vec":
        if not a.checkpoint:
            raise UsageError("--measure bl2vec needs --checkpoint")
        model = _bl2vec_model(run, a.checkpoint, a)
        va, vb = model.embed(A).astype(np.float64), model.embed(B).astype(np.float64)
        D = np.sqrt(((va[:, None, :] - vb[None, :, :]) ** 2).sum(axis=2))
    else:
        D = distance_matrix(a.measure, A, B)
    rows = []
    if a.matrix:
        for i, la in enumerate(A):
            rows.append({"id": la.id, "measure": a.measure, "distances": {lb.id: float(D[i, j]) for j, lb in enumerate(B)}})
    else:
        if len(A) != len(B):
            raise DataError("pairwise mode needs equally many layouts in --a and --b (or pass --matrix)")
        for i, (la, lb) in enumerate(zip(A, B)):
            rows.append({"a": la.id, "b": lb.id, "measure": a.measure, "distance": float(D[i, i])})
    _emit(rows, run.output(a.output) if a.output else None)


def cmd_predict(run: Run, a):
    from .blcnn import BLCNN

    model = BLCNN.from_checkpoint(_load_ckpt(run, a.checkpoint))
    _check_featurizer(run, model.featurizer, a)
    layouts = _read(run, a.layouts)
    probs = model.predict(layouts)
    rows = [{"id": l.id, "task": model.task.task, "probabilities": [float(x) for x in p]} for l, p in zip(layouts, probs)]
    _emit(rows, run.output(a.output) if a.output else None)


def cmd_generate(run: Run, a):
    from .blgan import BLGAN
    from .core import write_layouts

    model = BLGAN.from_checkpoints(_load_ckpt(run, a.generator))
    write_layouts(model.generate(a.count, a.seed, prefix=f"gen-{a.seed}"), str(run.output(a.output)))


def _measures(a) -> List[str]:
    ms = [m.strip() for m in a.measures.split(",") if m.strip()]
    if "bl2vec" in ms and not a.checkpoint:
        raise UsageError("measure bl2vec needs --checkpoint")
    return ms


def cmd_eval_retrieval(run: Run, a):
    from .bl2vec import PerturbConfig
    from .evalkit import RetrievalProtocol, format_table, make_retrieval_set, self_similarity_eval

    layouts = _read(run, a.layouts)
    model = _bl2vec_model(run, a.checkpoint, a) if a.checkpoint else None
    proto = RetrievalProtocol(a.queries, a.db, PerturbConfig(a.noise, a.drop), a.seed)
    rs = make_retrieval_set(layouts, proto)
    rows = [self_similarity_eval(m, layouts, proto, model, rs).to_dict() for m in _measures(a)]
    _finish_eval(run, a, rows, format_table(rows))


def _labels(layouts, name):
    vals = [None if l.labels is None else getattr(l.labels, name) for l in layouts]
    if any(v is None for v in vals):
        raise DataError(f"every layout needs a {name!r} label")
    return np.array([int(v) for v in vals])


def cmd_eval_classify(run: Run, a):
    from .evalkit import format_table, knn_classify, pairwise_distances

    layouts = _read(run, a.layouts)
    y = _labels(layouts, a.label)
    model = _bl2vec_model(run, a.checkpoint, a) if a.checkpoint else None
    rows = [{"measure": m, "accuracy": knn_classify(pairwise_distances(m, layouts, model), y, a.k)} for m in _measures(a)]
    _finish_eval(run, a, rows, format_table(rows))


def cmd_eval_cluster(run: Run, a):
    from .evalkit import cluster_eval, format_table

    layouts = _read(run, a.layouts)
    y = _labels(layouts, a.label)
    model = _bl2vec_model(run, a.checkpoint, a)
    ari, ami = cluster_eval(model.embed(layouts), y, a.clusters, a.seed)
    rows = [{"measure": "bl2vec", "ari_norm": ari, "ami_norm": ami}]
    _finish_eval(run, a, rows, format_table(rows))


def cmd_bench(run: Run, a):
    from .core import pack_layouts
    from .evalkit import format_table, linear_fit, timing_bench

    layouts = _read(run, a.layouts)
    sizes = [int(s) for s in a.sizes.split(",")]
    if max(sizes) > len(layouts):
        raise DataError(f"largest db size {max(sizes)} exceeds the {len(layouts)} layouts given")
    packed = pack_layouts([l.canonical() for l in layouts])
    model = _bl2vec_model(run, a.checkpoint, a) if a.checkpoint else None
    use_numba = None if a.backend == "auto" else a.backend == "numba"
    rows = timing_bench(_measures(a), packed, packed.take(np.arange(a.queries)), sizes, a.repeat, model, use_numba)
    fits = {}
    for m in {r["measure"] for r in rows}:
        pts = [(r["db_size"], r["query_s"]) for r in rows if r["measure"] == m]
        if len(pts) >= 2:
            fits[m] = dict(zip(("slope", "intercept", "r2"), linear_fit(*zip(*pts))))
    run.extra["fits"] = fits
    _finish_eval(run, a, rows, format_table(rows))


def cmd_render(run: Run, a):
    from .render import render_svg

    layouts = _read(run, a.layout)
    if a.id:
        matches = [l for l in layouts if l.id == a.id]
        if not matches:
            raise DataError(f"no layout with id {a.id!r}")
        lay = matches[0]
    else:
        lay = layouts[0]
    run.output(a.output).write_text(render_svg(lay, _geom(a), scale=a.scale), encoding="utf-8")


def _finish_eval(run: Run, a, rows, table: str):
    run.extra["metrics"] = rows
    if a.output:
        run.output(a.output).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    sys.stdout.write(table + "\n")


# --------------------------------------------------------------------------- parser


def _common(p, seed_required=False):
    p.add_argument("--config", help="JSON config file; a section per subcommand")
    p.add_argument("--data-dir", default=os.environ.get(DATA_DIR_ENV),
                   help=f"directory for relative input paths (default: ${DATA_DIR_ENV})")
    p.add_argument("--threads", type=int, default=1, help="thread cap for parallel-capable operations")
    p.add_argument("--manifest", help="manifest path (default: next to the main output)")
    p.add_argument("-v", "--verbose", action="store_true")
    if seed_required:
        p.add_argument("--seed", type=int, required=True)


def _tok_flags(p, defaults=True):
    p.add_argument("--cell-size", type=float, default=15.0 if defaults else None)
    p.add_argument("--angle-step", type=float, default=15.0 if defaults else None)
    p.add_argument("--distance-step", type=float, default=10.0 if defaults else None)


def _net_flags(p, lr=1e-5):
    p.add_argument("--embed-dim", type=int, default=10)
    p.add_argument("--filters", type=int, default=156)
    p.add_argument("--l2", type=float, default=1e-3)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--eval-every", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--max-steps", type=int, default=None, help="hard cap on optimiser steps")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="billiards", description="Billiards layout analytics.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, func, help, seed=False):
        p = sub.add_parser(name, help=help)
        _common(p, seed)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate planted-label synthetic layouts", seed=True)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--min-balls", type=int, default=1)
    p.add_argument("--max-balls", type=int, default=9)
    p.add_argument("--weights", type=float, nargs=3, default=[1.0, 1.0, 1.0])
    p.add_argument("--label-noise", type=float, default=0.25)
    p.add_argument("-o", "--output", required=True)

    p = add("validate", cmd_validate, "check layouts against the table's invariants")
    p.add_argument("--layouts", required=True)
    p.add_argument("-o", "--output")

    p = add("features", cmd_features, "per-ball geometric features")
    p.add_argument("--layouts", required=True)
    p.add_argument("-o", "--output")

    p = add("tokenize", cmd_tokenize, "per-ball token ids")
    p.add_argument("--layouts", required=True)
    _tok_flags(p)
    p.add_argument("-o", "--output")

    p = add("train-bl2vec", cmd_train_bl2vec, "train the layout embedding", seed=True)
    p.add_argument("--layouts", required=True)
    _tok_flags(p)
    _net_flags(p)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--pos-noise", type=float, default=0.2)
    p.add_argument("--pos-drop", type=float, default=0.2)
    p.add_argument("--neg-noise", type=float, default=0.4)
    p.add_argument("--neg-drop", type=float, default=0.4)
    p.add_argument("-o", "--output", required=True)

    p = add("train-blcnn", cmd_train_blcnn, "train an outcome classifier", seed=True)
    p.add_argument("--layouts", required=True)
    p.add_argument("--task", choices=("clear", "win", "potted"), default="clear")
    _tok_flags(p)
    _net_flags(p)
    p.set_defaults(epochs=60, eval_every=50)
    p.add_argument("-o", "--output", required=True)

    p = add("train-blgan", cmd_train_blgan, "train the layout generator", seed=True)
    p.add_argument("--layouts", required=True, help="layouts; only clear-labelled ones are used")
    p.add_argument("--scorer", required=True, help="clear-task classifier checkpoint")
    _tok_flags(p, defaults=False)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--episodes", type=int, default=16)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--gen-lr", type=float, default=5e-4)
    p.add_argument("--disc-lr", type=float, default=1e-5)
    p.add_argument("--l2", type=float, default=1e-3)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("-o", "--output", required=True, help="generator checkpoint")
    p.add_argument("--disc-output", help="discriminator checkpoint (default: <output>.disc.ckpt)")

    p = add("embed", cmd_embed, "layout vectors from a trained embedding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layouts", required=True)
    _tok_flags(p, defaults=False)
    p.add_argument("-o", "--output", help=".npy for a float32 matrix, otherwise JSON lines")

    p = add("index", cmd_index, "build a retrieval index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layouts", required=True)
    _tok_flags(p, defaults=False)
    p.add_argument("-o", "--output", required=True)

    p = add("query", cmd_query, "k nearest indexed layouts")
    p.add_argument("--index", required=True)
    p.add_argument("--layout", required=True)
    p.add_argument("--checkpoint", help="embedding checkpoint (default: the one recorded in the index)")
    p.add_argument("--k", type=int, default=10)
    _tok_flags(p, defaults=False)
    p.add_argument("-o", "--output")

    p = add("distance", cmd_distance, "layout distances under one measure")
    p.add_argument("--measure", required=True, choices=("emd", "hausdorff", "dtw", "frechet", "pm", "bl2vec"))
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--matrix", action="store_true", help="all pairs instead of row-wise pairs")
    p.add_argument("--checkpoint")
    _tok_flags(p, defaults=False)
    p.add_argument("-o", "--output")

    p = add("predict", cmd_predict, "class probabilities from a classifier")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layouts", required=True)
    _tok_flags(p, defaults=False)
    p.add_argument("-o", "--output")

    p = add("generate", cmd_generate, "sample layouts from a trained generator", seed=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("-o", "--output", required=True)

    p = add("eval-retrieval", cmd_eval_retrieval, "self-similarity HR@10 and MRR", seed=True)
    p.add_argument("--layouts", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--measures", default="emd,hausdorff,dtw,frechet,pm")
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--db", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--drop", type=float, default=0.2)
    _tok_flags(p, defaults=False)
    p.add_argument("-o", "--output")

    p = add("eval-classify", cmd_eval_classify, "leave-one-out kNN accuracy")
    p.add_argument("--layouts", required=True)
    p.add_argument("--label", choices=("clear", "win"), default="clear")
    p.add_argument("--checkpoint")
    p.add_argument("--measures", default="emd,hausdorff,dtw,frechet,pm")
    p.add_argument("--k", type=int, default=10)
    _tok_flags(p, defaults=False)
    p.add_argument("-o", "--output")

    p = add("eval-cluster", cmd_eval_cluster, "k-means on embeddings, normalised ARI/AMI", seed=True)
    p.add_argument("--layouts", required=True)
    p.add_argument("--label", choices=("clear", "win"), default="clear")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clusters", type=int, default=2)
    _tok_flags(p, defaults=False)
    p.add_argument("-o", "--output")

    p = add("bench", cmd_bench, "per-query timing against database size")
    p.add_argument("--layouts", required=True, help="database layouts (the first --queries also serve as queries)")
    p.add_argument("--checkpoint")
    p.add_argument("--measures", default="dtw,emd")
    p.add_argument("--sizes", default="1000,2000,4000")
    p.add_argument("--queries", type=int, default=5)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--backend", choices=("auto", "numba", "numpy"), default="auto")
    _tok_flags(p, defaults=False)
    p.add_argument("-o", "--output")

    p = add("render", cmd_render, "draw a layout as SVG")
    p.add_argument("--layout", required=True)
    p.add_argument("--id", help="layout id (default: the first record)")
    p.add_argument("--scale", type=float, default=4.0)
    p.add_argument("-o", "--output", required=True)
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv: List[str]):
    """Second parse with the config file's section installed as parser defaults."""
    args = ap.parse_args(argv)
    if not args.config:
        return args
    path = Path(args.config)
    if not path.exists():
        raise DataError(f"config not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"config is not valid JSON: {exc}") from None
    section = cfg.get(args.command, {})
    if not isinstance(section, dict):
        raise DataError(f"config section {args.command!r} must be an object")
    subparser = next(a for a in ap._subparsers._group_actions if isinstance(a, argparse._SubParsersAction))
    sp = subparser.choices[args.command]
    known = {a.dest for a in sp._actions}
    defaults = {}
    for k, v in section.items():
        dest = k.replace("-", "_")
        if dest not in known or dest in ("seed", "config", "func"):
            raise UsageError(f"config key {k!r} is not an option of {args.command}")
        defaults[dest] = v
    sp.set_defaults(**defaults)
    return ap.parse_args(argv)


def _error(code: int, kind: str, msg: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": msg, "exit_code": code}) + "\n")
    return code


def main(argv: Optional[List[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .core import LayoutFormatError
    from .nn import NumericalError

    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = _apply_config(ap, argv)
    except UsageError as exc:
        return _error(EXIT_USAGE, "usage", str(exc))
    except DataError as exc:
        return _error(EXIT_DATA, "data", str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    run = Run(args, argv)
    code = EXIT_OK
    err = None
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(args.threads) if args.threads else contextlib.nullcontext():
            args.func(run, args)
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head); not an error
        devnull = os.open(os.devnull, os.O_WRONLY)
        os.dup2(devnull, sys.stdout.fileno())
    except UsageError as exc:
        code, err = EXIT_USAGE, ("usage", str(exc))
    except LayoutFormatError as exc:
        code, err = EXIT_DATA, ("data", "; ".join(f"line {n}: {m}" for n, m in exc.problems))
    except (DataError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        code, err = EXIT_DATA, ("data", str(exc))
    except (NumericalError, FloatingPointError) as exc:
        code, err = EXIT_NUMERIC, ("numeric", str(exc))
    run.extra["exit_code"] = code
    if err:
        run.extra["error"] = {"kind": err[0], "message": err[1]}
    try:
        run.write_manifest()
    except OSError as exc:
        log.warning("could not write manifest: %s", exc)
    if err:
        return _error(code, *err)
    return code


if __name__ == "__main__":
    sys.exit(main())
