"""Command-line pipeline: synth, merge-coref, pretrain, train-typing,
train-span, evaluate, ablate.

Every run resolves its configuration (flags > config file > defaults),
derives all randomness from --seed, writes its artifacts under --out,
and records a manifest with sha256 digests of inputs and artifacts.
Per-epoch training logs are emitted as JSON lines on stdout.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

from . import consensus as consensus_mod
from . import entity_typing, pipeline, pretrain as pretrain_mod, report, spandet
from .corpus import CorpusError, label_depth, load_corpus, save_corpus, with_annotation
from .encoder import EncoderConfig, build_vocab, load_checkpoint
from .metrics import confidence_report, span_report, typing_report
from .synth import SynthConfig, generate
from .util import dump_json, format_table, sha256_file


@click.group()
def main():
    """Coreference-supervised entity encoders, end to end."""


class _Run:
    """Collects inputs/artifacts and writes <out>/manifest.json."""

    def __init__(self, subcommand: str, out_dir, config: dict, seed: int):
        self.subcommand = subcommand
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.seed = seed
        self.inputs = {}
        self.t0 = time.monotonic()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def finish(self) -> None:
        artifacts = {}
        for p in sorted(self.out_dir.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                artifacts[str(p.relative_to(self.out_dir))] = sha256_file(p)
        manifest = {
            "subcommand": self.subcommand,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "artifacts": artifacts,
            "duration_s": round(time.monotonic() - self.t0, 3),
        }
        dump_json(manifest, self.out_dir / "manifest.json")


def _load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _fail(message: str) -> None:
    click.echo(json.dumps({"error": message}), err=True)
    sys.exit(1)


@main.command("synth")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="SynthConfig as JSON.")
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def synth_cmd(config_path, seed, out_dir):
    """Generate a synthetic corpus (corpus.jsonl) with gold + noisy coref."""
    raw = _load_json(config_path) if config_path else {}
    if seed is not None:
        raw["seed"] = seed
    try:
        cfg = SynthConfig.from_dict(raw)
    except (ValueError, TypeError) as exc:
        _fail(f"bad synth config: {exc}")
    run = _Run("synth", out_dir, cfg.to_dict(), cfg.seed)
    if config_path:
        run.add_input(config_path)
    sc = generate(cfg)
    sc.write_jsonl(run.out_dir / "corpus.jsonl")
    run.finish()
    click.echo(json.dumps({"stories": len(sc.corpus.stories),
                           "mentions": len(sc.corpus.typed_mentions)}))


@main.command("merge-coref")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--systems", default=None,
              help="Comma-separated pair of system names (default: first two).")
@click.option("--match", type=click.Choice(["exact", "head"]), default="exact")
@click.option("--out", "out_dir", required=True, type=click.Path())
def merge_coref_cmd(corpus_path, systems, match, out_dir):
    """Append the consensus annotation of two systems to a corpus."""
    run = _Run("merge-coref", out_dir,
               {"systems": systems, "match": match}, seed=0)
    run.add_input(corpus_path)
    try:
        corpus = load_corpus(corpus_path)
        if systems:
            names = [s.strip() for s in systems.split(",")]
            if len(names) != 2:
                raise CorpusError("--systems needs exactly two names")
            ann_a, ann_b = (corpus.annotation(n) for n in names)
        else:
            candidates = [a for a in corpus.coref if a.system_name != "gold"]
            if len(candidates) < 2:
                raise CorpusError("corpus has fewer than two system annotations")
            ann_a, ann_b = candidates[0], candidates[1]
        merged = consensus_mod.consensus(ann_a, ann_b, match=match)
    except (CorpusError, ValueError) as exc:
        _fail(str(exc))
    save_corpus(with_annotation(corpus, merged), run.out_dir / "corpus.jsonl")
    run.finish()
    n_chains = sum(len(ch) for ch in merged.chains.values())
    click.echo(json.dumps({"system": merged.system_name, "chains": n_chains}))


@main.command("pretrain")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--coref", default="consensus",
              help="Chain source: a system name, or 'consensus'.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="PretrainConfig (and optional 'encoder' section) as JSON.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def pretrain_cmd(corpus_path, coref, config_path, seed, out_dir):
    """Contrastive pre-training; per-epoch checkpoints, log, loss figure."""
    raw = _load_json(config_path) if config_path else {}
    enc_raw = raw.pop("encoder", {})
    if seed is not None:
        raw["seed"] = seed
    try:
        cfg = pretrain_mod.PretrainConfig.from_dict(raw)
        corpus = load_corpus(corpus_path)
        annotation = pipeline.resolve_chains(corpus, coref)
        vocab = build_vocab(corpus.stories)
        enc_raw.setdefault("seed", cfg.seed)
        enc_cfg = EncoderConfig(**{**enc_raw, "vocab_size": len(vocab)})
    except (CorpusError, ValueError, TypeError) as exc:
        _fail(str(exc))
    run = _Run("pretrain", out_dir,
               {"pretrain": cfg.to_dict(), "encoder": enc_cfg.to_dict(),
                "coref": annotation.system_name},
               cfg.seed)
    run.add_input(corpus_path)
    if config_path:
        run.add_input(config_path)
    try:
        result = pretrain_mod.pretrain(
            corpus, annotation, cfg, encoder_config=enc_cfg, vocab=vocab,
            out_dir=run.out_dir, log_fn=lambda row: click.echo(json.dumps(row)),
        )
    except ValueError as exc:
        _fail(str(exc))
    report.save_loss_curves(result.log, run.out_dir / "loss_curves.png")
    run.finish()
    click.echo(json.dumps({"best_epoch": result.best_epoch,
                           "checkpoint": str(run.out_dir / "best.ckpt")}))


def _bool_flag(value: str) -> bool:
    return value == "true"


@main.command("train-typing")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--strategy", type=click.Choice(entity_typing.SPAN_STRATEGIES),
              default="head_word")
@click.option("--frozen", type=click.Choice(["true", "false"]), default="true")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--eval-corpus", "eval_path", type=click.Path(exists=True), default=None,
              help="Corpus to predict on (default: the training corpus).")
@click.option("--out", "out_dir", required=True, type=click.Path())
def train_typing_cmd(corpus_path, ckpt_path, strategy, frozen, config_path, seed,
                     eval_path, out_dir):
    """Train the per-type classifiers; write model.bin and predictions.jsonl."""
    raw = _load_json(config_path) if config_path else {}
    raw["strategy"] = strategy
    if seed is not None:
        raw["seed"] = seed
    frozen = _bool_flag(frozen)
    try:
        cfg = entity_typing.TypingTrainConfig.from_dict(raw)
        ckpt = load_checkpoint(ckpt_path)
        corpus = load_corpus(corpus_path)
        if not corpus.typed_mentions:
            raise CorpusError("training corpus has no typed mentions")
    except (CorpusError, ValueError) as exc:
        _fail(str(exc))
    run = _Run("train-typing", out_dir,
               {"typing": cfg.to_dict(), "frozen": frozen}, cfg.seed)
    run.add_input(corpus_path)
    run.add_input(ckpt_path)
    if config_path:
        run.add_input(config_path)

    fit = entity_typing.train(pipeline.typed_pairs(corpus), ckpt,
                              frozen=frozen, config=cfg)
    for row in fit.log:
        click.echo(json.dumps(row))
    entity_typing.save_typing_model(fit.model, run.out_dir / "model.bin")
    if not frozen:
        from .encoder import save_checkpoint
        save_checkpoint(fit.checkpoint, run.out_dir / "finetuned.ckpt")

    eval_corpus = load_corpus(eval_path) if eval_path else corpus
    if eval_path:
        run.add_input(eval_path)
    _write_typing_predictions(fit.model, fit.checkpoint, eval_corpus,
                              run.out_dir / "predictions.jsonl")
    run.finish()
    click.echo(json.dumps({"best_epoch": fit.best_epoch,
                           "model": str(run.out_dir / "model.bin")}))


def _write_typing_predictions(model, ckpt, corpus, path) -> None:
    pairs = pipeline.typed_pairs(corpus)
    encoder = ckpt.encoder()
    X, _ = entity_typing.embed_mentions(
        encoder, ckpt.vocab, [(s, tm.mention) for s, tm in pairs], model.strategy)
    with open(path, "w", encoding="utf-8") as f:
        for i, (_, tm) in enumerate(pairs):
            probs, assigned = model.predict(X[i])
            m = tm.mention
            f.write(json.dumps({
                "kind": "typed_mention", "story": m.story_id, "sent": m.sent_index,
                "start": m.start, "end": m.end, "head": m.head,
                "labels": sorted(assigned),
                "probs": {k: round(v, 6) for k, v in sorted(probs.items())},
                "source": "predicted",
            }) + "\n")


def _span_type(labels) -> str:
    return max(labels, key=lambda lab: (label_depth(lab), lab))


def _gold_spans_by_sentence(corpus):
    spans = {}
    for story in corpus.stories:
        for sent in story.sentences:
            spans[(story.story_id, sent.sent_index)] = []
    for tm in corpus.typed_mentions:
        m = tm.mention
        spans[(m.story_id, m.sent_index)].append((m.start, m.end, _span_type(tm.labels)))
    return spans


@main.command("train-span")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--frozen", type=click.Choice(["true", "false"]), default="true")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--eval-corpus", "eval_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def train_span_cmd(corpus_path, ckpt_path, frozen, config_path, seed, eval_path,
                   out_dir):
    """Train the token tagger; write model.bin and predicted spans."""
    raw = _load_json(config_path) if config_path else {}
    if seed is not None:
        raw["seed"] = seed
    frozen = _bool_flag(frozen)
    try:
        cfg = spandet.TaggerTrainConfig.from_dict(raw)
        ckpt = load_checkpoint(ckpt_path)
        corpus = load_corpus(corpus_path)
        gold = _gold_spans_by_sentence(corpus)
        train_data = [
            (corpus.story(sid).sentences[si], spans)
            for (sid, si), spans in sorted(gold.items())
        ]
        model, tuned = spandet.train_tagger(train_data, ckpt, frozen=frozen, config=cfg)
    except (CorpusError, ValueError) as exc:
        _fail(str(exc))
    run = _Run("train-span", out_dir, {"tagger": cfg.to_dict(), "frozen": frozen},
               cfg.seed)
    run.add_input(corpus_path)
    run.add_input(ckpt_path)
    if config_path:
        run.add_input(config_path)
    spandet.save_tagger_model(model, run.out_dir / "model.bin")

    eval_corpus = load_corpus(eval_path) if eval_path else corpus
    if eval_path:
        run.add_input(eval_path)
    with (run.out_dir / "predictions.jsonl").open("w", encoding="utf-8") as f:
        for story in eval_corpus.stories:
            sentences = list(story.sentences)
            predicted = spandet.predict_spans(model, tuned, sentences)
            for sent, spans in zip(sentences, predicted):
                for start, end, typ in spans:
                    f.write(json.dumps({
                        "kind": "typed_mention", "story": story.story_id,
                        "sent": sent.sent_index, "start": start, "end": end,
                        "head": end - 1, "labels": [typ], "source": "predicted",
                    }) + "\n")
    run.finish()
    click.echo(json.dumps({"tags": model.tags,
                           "model": str(run.out_dir / "model.bin")}))


def _read_prediction_lines(path):
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})")
            if obj.get("kind") == "typed_mention":
                rows.append(obj)
    return rows


@main.command("evaluate")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["typing", "span"]), required=True)
@click.option("--figures/--no-figures", default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def evaluate_cmd(pred_path, gold_path, mode, figures, out_dir):
    """Score predictions against gold; JSON report, text table, figures."""
    run = _Run("evaluate", out_dir, {"mode": mode}, seed=0)
    run.add_input(pred_path)
    run.add_input(gold_path)
    try:
        gold_corpus = load_corpus(gold_path)
        pred_rows = _read_prediction_lines(pred_path)
        if mode == "typing":
            rep = _evaluate_typing(pred_rows, gold_corpus, run.out_dir)
        else:
            rep = _evaluate_span(pred_rows, gold_corpus)
    except CorpusError as exc:
        _fail(str(exc))
    report.write_report(rep, run.out_dir, figures=figures)
    run.finish()
    click.echo(report.report_text(rep))


def _evaluate_typing(pred_rows, gold_corpus, out_dir):
    by_key = {}
    for obj in pred_rows:
        key = (str(obj["story"]), int(obj["sent"]), int(obj["start"]), int(obj["end"]))
        by_key[key] = obj
    gold_sets = []
    pred_sets = []
    prob_maps = []
    for tm in sorted(gold_corpus.typed_mentions, key=lambda t: t.mention.key):
        gold_sets.append(set(tm.labels))
        obj = by_key.get(tm.mention.key)
        pred_sets.append(set(obj.get("labels", [])) if obj else set())
        prob_maps.append(obj.get("probs", {}) if obj else {})
    rep = typing_report(pred_sets, gold_sets)
    if any(prob_maps):
        rows = confidence_report(prob_maps, gold_sets)
        with (Path(out_dir) / "confidence.tsv").open("w", encoding="utf-8") as f:
            f.write("instance\tgold_label\tprobability\n")
            for i, lab, p in rows:
                f.write(f"{i}\t{lab}\t{p:.6f}\n")
    return rep


def _evaluate_span(pred_rows, gold_corpus):
    gold = _gold_spans_by_sentence(gold_corpus)
    pred = {key: [] for key in gold}
    for obj in pred_rows:
        key = (str(obj["story"]), int(obj["sent"]))
        if key in pred:
            for lab in obj.get("labels", []):
                pred[key].append((int(obj["start"]), int(obj["end"]), lab))
    keys = sorted(gold)
    return span_report([pred[k] for k in keys], [gold[k] for k in keys])


_ABLATION_AXES = ("span_strategy", "negative_scope", "mask_policy", "coref_source")


@main.command("ablate")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Base config: optional 'pretrain', 'typing', 'encoder' sections.")
@click.option("--axes", default="",
              help=f"Comma-separated subset of {', '.join(_ABLATION_AXES)}; "
                   "empty runs the single baseline cell.")
@click.option("--seed", type=int, default=0)
@click.option("--test-fraction", type=float, default=0.2)
@click.option("--out", "out_dir", required=True, type=click.Path())
def ablate_cmd(corpus_path, config_path, axes, seed, test_fraction, out_dir):
    """Grid of probe experiments along the requested axes."""
    axis_list = [a.strip() for a in axes.split(",") if a.strip()]
    for axis in axis_list:
        if axis not in _ABLATION_AXES:
            raise click.UsageError(
                f"unknown axis {axis!r}; choose from {', '.join(_ABLATION_AXES)}")
    raw = _load_json(config_path) if config_path else {}
    try:
        corpus = load_corpus(corpus_path)
        base_pre = pretrain_mod.PretrainConfig.from_dict(
            {**raw.get("pretrain", {}), "seed": seed})
        base_typ = entity_typing.TypingTrainConfig.from_dict(
            {**raw.get("typing", {}), "seed": seed})
        enc_raw = raw.get("encoder")
        enc_cfg = (EncoderConfig(**{**enc_raw, "vocab_size": 1, "seed": seed})
                   if enc_raw else None)
    except (CorpusError, ValueError, TypeError) as exc:
        _fail(str(exc))
    run = _Run("ablate", out_dir,
               {"axes": axis_list, "pretrain": base_pre.to_dict(),
                "typing": base_typ.to_dict(), "test_fraction": test_fraction},
               seed)
    run.add_input(corpus_path)
    if config_path:
        run.add_input(config_path)

    values = {
        "span_strategy": list(entity_typing.SPAN_STRATEGIES),
        "negative_scope": list(pretrain_mod.NEGATIVE_SCOPES),
        "mask_policy": ["head", "full_span", "none"],
        "coref_source": [a.system_name for a in corpus.coref
                         if a.system_name != "gold"
                         and not a.system_name.startswith("consensus(")] + ["consensus"],
    }
    cells = [{}]
    for axis in axis_list:
        cells = [dict(c, **{axis: v}) for c in cells for v in values[axis]]

    rows = []
    for cell in cells:
        pre = dict(base_pre.to_dict())
        typ = dict(base_typ.to_dict())
        if "negative_scope" in cell:
            pre["negative_scope"] = cell["negative_scope"]
        if "mask_policy" in cell:
            pre["mask_policy"] = cell["mask_policy"]
        if "span_strategy" in cell:
            typ["strategy"] = cell["span_strategy"]
        result = pipeline.run_probe(
            corpus, seed=seed, variant="contrastive",
            coref_source=cell.get("coref_source", "consensus"),
            pre_cfg=pretrain_mod.PretrainConfig.from_dict(pre),
            typ_cfg=entity_typing.TypingTrainConfig.from_dict(typ),
            enc_cfg=enc_cfg, test_fraction=test_fraction,
        )
        name = ",".join(f"{k}={cell[k]}" for k in axis_list) or "baseline"
        row = {"cell": name, **{k: cell[k] for k in axis_list},
               "micro_f1": result.micro_f1, "macro_f1": result.macro_f1}
        rows.append(row)
        click.echo(json.dumps(row))

    dump_json(rows, run.out_dir / "ablation.json")
    with (run.out_dir / "ablation.tsv").open("w", encoding="utf-8") as f:
        f.write("cell\tmicro_f1\tmacro_f1\n")
        for row in rows:
            f.write(f"{row['cell']}\t{row['micro_f1']:.6f}\t{row['macro_f1']:.6f}\n")
    report.save_ablation_chart(rows, run.out_dir / "ablation.png")
    run.finish()
    click.echo(format_table(
        ["cell", "micro_f1", "macro_f1"],
        [(r["cell"], f"{r['micro_f1']:.4f}", f"{r['macro_f1']:.4f}") for r in rows],
    ))


if __name__ == "__main__":
    main()
