"""Command-line entry point.

Subcommands: synth, align, train, extract, eval, bench. Exit codes: 0 ok,
1 usage error, 2 data error, 3 training failure. Every artifact-producing run
writes a ``<output>.manifest.json`` with the resolved configuration, the seed
and digests of the inputs, enough to re-run it exactly.

Option precedence: command-line flags > config file (--config, flat
"key = value" lines) > METAFORGE_SEED (seed only) > built-in defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .align import FixtureGateway, HttpGateway, build_record, fetch_metadata
from .features import DOI_RE
from .core import Document, read_corpus, write_corpus
from .errors import (
    FormatError,
    GatewayError,
    GatewayNotFound,
    MetaforgeError,
    TrainingFailure,
)
from .evaluation import (
    load_external_predictions,
    render_table,
    save_predictions,
    score,
    time_inference,
)
from .synth import FieldSampler, load_templates_dir, synthesize_corpus
from .templates import builtin_templates

METHODS = (
    "crf",
    "bilstm",
    "bilstm-crf",
    "textmap-word2vec",
    "textmap-char2vec",
    "textmap-precomputed",
)


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------


def parse_config_file(path: str) -> dict:
    """Flat key = value lines; values are parsed as JSON scalars when possible."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"expected key = value, got {line!r}", line=lineno)
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            value = value.strip()
            try:
                out[key] = json.loads(value)
            except json.JSONDecodeError:
                out[key] = value
    return out


def resolve_options(args: argparse.Namespace, defaults: dict) -> dict:
    """Layer flags over config file over environment over defaults."""
    file_cfg = parse_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            value = file_cfg.get(key)
        if value is None and key == "seed":
            env = os.environ.get("METAFORGE_SEED")
            value = int(env) if env else None
        if value is None:
            value = default
        resolved[key] = value
    return resolved


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path: str, command: str, options: dict, inputs: list[str]) -> None:
    manifest = {
        "tool": "metaforge",
        "version": __version__,
        "command": command,
        "config": {k: v for k, v in sorted(options.items())},
        "inputs": {p: sha256_file(p) for p in inputs if p and os.path.isfile(p)},
        "output": os.path.basename(out_path),
    }
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, sort_keys=True, indent=1)


def _require_file(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"input not found: {path}")
    return path


# ---------------------------------------------------------------------------
# Model loading / extraction dispatch
# ---------------------------------------------------------------------------


def load_any_model(path: str, embeddings_path: str | None = None):
    """(kind, model, provider) from a model file of any supported format."""
    _require_file(path)
    with open(path, "r", encoding="utf-8") as f:
        head = json.load(f)
    fmt = head.get("format", "")
    provider = None
    emb_file = embeddings_path or (path + ".emb" if os.path.exists(path + ".emb") else None)
    if emb_file:
        from .embeddings import load_provider

        provider = load_provider(emb_file)
    if fmt == "metaforge-crf/1":
        from .crf import load_crf

        return "crf", load_crf(path), None
    if fmt == "metaforge-seqlab/1":
        from .seqlab import load_seqlab

        model, manifest = load_seqlab(path)
        if provider is None:
            raise FileNotFoundError(f"no embedding file for {path} (looked for {path}.emb)")
        return manifest["kind"], model, provider
    if fmt == "metaforge-textmap/1":
        from .textmap import load_textmap

        model, manifest = load_textmap(path)
        if provider is None:
            raise FileNotFoundError(f"no embedding file for {path} (looked for {path}.emb)")
        return "textmap", model, provider
    raise FormatError(f"{path}: unknown model format {fmt!r}")


def make_extractor(kind: str, model, provider):
    """Uniform doc -> per-token labels callable."""
    if kind == "crf":
        return model.extract
    if kind == "bilstm":
        from .embeddings import embed_tokens

        def run_classifier(doc: Document):
            if not doc.page.tokens:
                return []
            xs = embed_tokens(provider, [t.text for t in doc.page.tokens])
            return model.predict(xs)

        return run_classifier
    if kind == "bilstm-crf":
        from .embeddings import embed_tokens

        def run_crf(doc: Document):
            if not doc.page.tokens:
                return []
            xs = embed_tokens(provider, [t.text for t in doc.page.tokens])
            return model.decode(xs)

        return run_crf
    if kind == "textmap":
        from .textmap import extract as textmap_extract

        return lambda doc: textmap_extract(model, doc, provider)
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Training dispatch
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "sigma2": 10.0,
    "max_iters": 150,
    "tol": 1e-5,
    "dim": 64,
    "window": 5,
    "negatives": 5,
    "emb_epochs": 3,
    "emb_lr": 0.05,
    "min_count": 2,
    "hidden": None,  # per-method documented default
    "layers": None,
    "head": None,
    "epochs": 10,
    "lr": 0.1,
    "batch": 8,
    "clip": 5.0,
    "channels": 16,
    "heads": 4,
    "embeddings": None,
}


def _train_provider(method: str, docs, opts):
    from .embeddings import SkipGramConfig, token_streams, train_char2vec, train_word2vec

    cfg = SkipGramConfig(
        d=opts["dim"], window=opts["window"], negatives=opts["negatives"],
        epochs=opts["emb_epochs"], lr=opts["emb_lr"], seed=opts["seed"],
        min_count=int(opts["min_count"]),
    )
    streams = token_streams(docs)
    if method.endswith("char2vec"):
        return train_char2vec(streams, cfg)
    return train_word2vec(streams, cfg)


def run_train(method: str, docs, opts, out: str, log=print):
    if method == "crf":
        from .crf import TrainConfig, save_two_layer, train_two_layer

        cfg = TrainConfig(
            sigma2=opts["sigma2"], max_iters=int(opts["max_iters"]), tol=opts["tol"]
        )
        pipeline = train_two_layer(docs, cfg, jobs=opts["jobs"])
        save_two_layer(out, pipeline)
        return

    if method in ("bilstm", "bilstm-crf"):
        from .embeddings import embed_tokens, save_provider
        from .seqlab import (
            BiLstmClassifier,
            BiLstmCrf,
            TrainConfig,
            save_seqlab,
            train_bilstm,
            train_bilstm_crf,
        )

        provider = _train_provider("word2vec", docs, opts)
        index_of = None
        data = []
        for doc in docs:
            if not doc.page.tokens:
                continue
            xs = embed_tokens(provider, [t.text for t in doc.page.tokens])
            labels = doc.token_labels()
            if index_of is None:
                from .core import Label

                index_of = {l: i for i, l in enumerate(Label)}
            data.append((xs, np.asarray([index_of[l] for l in labels], dtype=np.int64)))
        cfg = TrainConfig(lr=opts["lr"], epochs=opts["epochs"], batch=opts["batch"],
                          seed=opts["seed"], clip=opts["clip"])
        if method == "bilstm":
            model = BiLstmClassifier.init(
                d_in=provider.d, hidden=opts["hidden"] or 112,
                n_layers=opts["layers"] or 3, head=opts["head"], seed=opts["seed"],
            )
            losses = train_bilstm(model, data, cfg)
        else:
            model = BiLstmCrf.init(
                d_in=provider.d, hidden=opts["hidden"] or 115,
                n_layers=opts["layers"] or 4, seed=opts["seed"],
            )
            losses = train_bilstm_crf(model, data, cfg)
        log(f"epoch losses: {['%.4f' % l for l in losses]}")
        save_seqlab(out, model, extra_meta={"embedding_file": os.path.basename(out) + ".emb"})
        save_provider(out + ".emb", provider)
        return

    if method.startswith("textmap"):
        from .embeddings import load_provider, save_provider
        from .textmap import (
            TextMapConfig,
            TextMapModel,
            TrainConfig,
            loss_weights,
            prepare_document,
            save_textmap,
            train,
        )

        if method == "textmap-precomputed":
            if not opts["embeddings"]:
                raise ValueError("textmap-precomputed needs --embeddings <file>")
            provider = load_provider(_require_file(opts["embeddings"]))
            mode = "per-block"
        else:
            provider = _train_provider(method, docs, opts)
            mode = "per-token"
        cfg = TextMapConfig(
            d=provider.d, mode=mode, channels=opts["channels"], heads=opts["heads"]
        )
        model = TextMapModel.init(cfg, seed=opts["seed"])
        prepared = [prepare_document(model, d, provider) for d in docs if d.page.tokens]
        tcfg = TrainConfig(lr=opts["lr"], epochs=opts["epochs"], batch=opts["batch"],
                           seed=opts["seed"])
        losses = train(model, prepared, tcfg)
        log(f"epoch objective: {['%.4f' % l for l in losses]}")
        log(f"loss weights: {loss_weights(model)}")
        save_textmap(out, model)
        save_provider(out + ".emb", provider)
        return

    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    defaults = {"n": 100, "seed": 0, "dpi": 8, "jobs": 1}
    opts = resolve_options(args, defaults)
    templates = (
        load_templates_dir(_require_file(args.templates)) if args.templates
        else builtin_templates()
    )
    docs = synthesize_corpus(
        templates, FieldSampler(), opts["n"], opts["seed"], dpi=opts["dpi"],
        jobs=opts["jobs"],
    )
    raster_dir = args.raster_dir or os.path.join(os.path.dirname(os.path.abspath(args.out)) or ".", "rasters")
    write_corpus(args.out, docs, raster_dir=raster_dir if opts["dpi"] > 0 else None)
    write_manifest(args.out, "synth", {**opts, "templates": args.templates or "builtin"},
                   inputs=[args.templates] if args.templates else [])
    print(f"wrote {len(docs)} documents to {args.out}")
    return 0


def _doc_doi(doc: Document) -> str | None:
    if doc.metadata and doc.metadata.doi:
        return doc.metadata.doi
    for t in doc.page.tokens:
        m = DOI_RE.search(t.text)
        if m:
            return m.group(0).rstrip(".,;")
    return None


def cmd_align(args) -> int:
    opts = resolve_options(args, {"seed": 0, "threshold": None})
    docs = read_corpus(_require_file(args.input))
    spec = args.gateway
    if spec.startswith("fixture:"):
        gateway = FixtureGateway(spec.split(":", 1)[1])
    elif spec.startswith("http:") or spec.startswith("https:"):
        gateway = HttpGateway(spec)
    else:
        raise ValueError(f"gateway must be fixture:<dir> or http(s)://..., got {spec!r}")

    thresholds = None
    if opts["threshold"] is not None:
        from .core import Label

        thresholds = {l: float(opts["threshold"]) for l in Label if l is not Label.DOI}

    accepted = []
    rejects = []
    reports = []
    for doc in docs:
        doi = _doc_doi(doc)
        if doi is None:
            rejects.append({"id": doc.id, "reason": "no DOI available"})
            continue
        try:
            record = fetch_metadata(doi, gateway)
        except GatewayNotFound:
            rejects.append({"id": doc.id, "reason": f"DOI not found: {doi}"})
            continue
        result = build_record(doc, record, thresholds)
        reports.append(
            {
                "id": doc.id,
                "matched": [m.label.value for m in result.matches],
                "unmatched": [l.value for l in result.unmatched],
            }
        )
        if not result.matches:
            rejects.append({"id": doc.id, "reason": "zero fields matched"})
            continue
        accepted.append(result.document)

    write_corpus(args.out, accepted)
    with open(args.rejects, "w", encoding="utf-8") as f:
        for r in rejects:
            f.write(json.dumps(r) + "\n")
    with open(args.out + ".report.jsonl", "w", encoding="utf-8") as f:
        for r in reports:
            f.write(json.dumps(r) + "\n")
    write_manifest(args.out, "align", {**opts, "gateway": spec}, inputs=[args.input])
    print(f"aligned {len(accepted)} documents, rejected {len(rejects)}")
    return 0


def cmd_train(args) -> int:
    opts = resolve_options(args, TRAIN_DEFAULTS)
    docs = read_corpus(_require_file(args.corpus))
    if not docs:
        raise ValueError(f"empty corpus: {args.corpus}")
    run_train(args.method, docs, opts, args.out)
    write_manifest(args.out, "train", {**opts, "method": args.method},
                   inputs=[args.corpus] + ([opts["embeddings"]] if opts["embeddings"] else []))
    print(f"trained {args.method} model -> {args.out}")
    return 0


def cmd_extract(args) -> int:
    opts = resolve_options(args, {"seed": 0, "embeddings": None})
    docs = read_corpus(_require_file(args.corpus))
    kind, model, provider = load_any_model(args.model, opts["embeddings"])
    extractor = make_extractor(kind, model, provider)
    predictions = {doc.id: extractor(doc) for doc in docs}
    save_predictions(args.out, predictions)
    write_manifest(args.out, "extract", {**opts, "model": args.model},
                   inputs=[args.corpus, args.model])
    print(f"extracted {len(predictions)} documents -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    gold = read_corpus(_require_file(args.gold))
    predictions = load_external_predictions(_require_file(args.pred), gold)
    report = score(gold, predictions)
    print(render_table(report))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(report.to_json_dict(), f, ensure_ascii=False, sort_keys=True, indent=1)
        write_manifest(args.json, "eval", {}, inputs=[args.gold, args.pred])
    return 0


def cmd_bench(args) -> int:
    opts = resolve_options(args, {**TRAIN_DEFAULTS, "repeats": 3})
    docs = read_corpus(_require_file(args.corpus))
    out = args.out or (args.corpus + f".{args.method}.bench-model")
    t0 = time.perf_counter()
    run_train(args.method, docs, opts, out, log=lambda *a: None)
    train_s = time.perf_counter() - t0
    kind, model, provider = load_any_model(out)
    extractor = make_extractor(kind, model, provider)
    stats = time_inference(extractor, docs, repeats=opts["repeats"])
    print(f"{'Model':<22}{'Training time':>16}{'Inference time':>22}")
    print(f"{args.method:<22}{train_s:>14.2f} s{stats.mean_s:>14.4f} "
          f"+/- {stats.std_s:.4f} s")
    write_manifest(out, "bench", {**opts, "method": args.method}, inputs=[args.corpus])
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaforge",
        description="metadata-extraction workbench: corpus tooling, training, evaluation",
    )
    parser.add_argument("--version", action="version", version=f"metaforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None, help="worker processes")

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    add_common(p)
    p.add_argument("--templates", help="template directory (default: built-ins)")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--raster-dir", dest="raster_dir")
    p.add_argument("--dpi", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("align", help="annotate token streams against gateway metadata")
    add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--gateway", required=True, help="fixture:<dir> or http(s)://base-url")
    p.add_argument("--out", required=True)
    p.add_argument("--rejects", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", help="train an extraction model")
    add_common(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    for flag, typ in (
        ("--sigma2", float), ("--max-iters", int), ("--tol", float),
        ("--dim", int), ("--window", int), ("--negatives", int),
        ("--emb-epochs", int), ("--emb-lr", float), ("--min-count", int),
        ("--hidden", int), ("--layers", int), ("--head", int),
        ("--epochs", int), ("--lr", float), ("--batch", int), ("--clip", float),
        ("--channels", int), ("--heads", int),
    ):
        p.add_argument(flag, type=typ, default=None)
    p.add_argument("--embeddings", help="precomputed block-embedding file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="label a corpus with a trained model")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="score predictions against gold annotations")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--json", help="also write machine-readable report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure training and inference wall-clock")
    add_common(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.add_argument("--repeats", type=int, default=None)
    for flag, typ in (
        ("--sigma2", float), ("--max-iters", int), ("--tol", float),
        ("--dim", int), ("--hidden", int), ("--layers", int), ("--head", int),
        ("--epochs", int), ("--lr", float), ("--batch", int), ("--clip", float),
        ("--channels", int), ("--heads", int), ("--window", int), ("--negatives", int),
        ("--emb-epochs", int), ("--emb-lr", float),
    ):
        p.add_argument(flag, type=typ, default=None)
    p.add_argument("--embeddings", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.func(args)
    except TrainingFailure as e:
        print(f"training failure: {e} {e.diagnostics}", file=sys.stderr)
        return 3
    except (FileNotFoundError, FormatError, GatewayError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except MetaforgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
