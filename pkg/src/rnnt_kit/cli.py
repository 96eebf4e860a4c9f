"""Command-line surface: data prep, training, LM training, decoding, scoring,
gradient checking, and learning-curve export.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  Every command is deterministic given identical inputs and seed
(training can pass --fixed-timing to zero the wall-time column of the
metrics log, which is otherwise the only non-reproducible output byte).
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import RunConfig, resolve_seed, schema_help_lines
from .decoding import (DecodeOpts, beam_search, greedy_decode, read_hypotheses,
                       score_corpus, write_hypotheses, write_nbest)
from .errors import ConfigError, DataError, NumericalError
from .lm import (LstmLmConfig, NgramLm, fusion_scorer, train_lstm_lm,
                 vocab_fingerprint)
from .model import Checkpoint, Model, init_prediction_from_lm
from .tensor import (Tensor, finite_difference_error, log_softmax, make_rng,
                     pairwise_sum, softmax)
from .training import Trainer, prepared_features, read_metrics


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rnnt",
        description="From-scratch RNN transducer toolkit.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="configuration keys (section.key = default -- description):\n"
               + "\n".join(schema_help_lines()))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build feature archives, vocab, CMVN stats")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", action="store_true",
                     help="generate the synthetic template corpus")
    src.add_argument("--wav-dir", help="directory of 16-bit PCM mono wav files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--vocab-size", type=int, default=14,
                   help="synthetic vocabulary size including blank and unk")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--transcripts", help="transcript file (wav mode)")
    p.add_argument("--vocab", help="vocabulary file (wav mode)")

    p = sub.add_parser("train", help="train a transducer model")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--data", help="directory from `prepare` (fills data paths)")
    p.add_argument("--out", required=True, help="run directory for checkpoints/logs")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-first-divisor", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--stop-cer", type=float)
    p.add_argument("--lm-init", help="LSTM LM checkpoint for the prediction network")
    p.add_argument("--fixed-timing", action="store_true",
                   help="write 0.000 in the seconds column for byte-stable logs")

    p = sub.add_parser("train-lm", help="train the LSTM LM on training transcripts")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--data", help="directory from `prepare`")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-ngram", help="count the character n-gram model")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--data", help="directory from `prepare`")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--order", type=int)
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("decode", help="decode a feature archive")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="feature archive to decode")
    p.add_argument("--vocab", help="vocabulary file (defaults from config)")
    p.add_argument("--out", required=True, help="hypothesis file")
    p.add_argument("--beam", type=int)
    p.add_argument("--temp", type=float, help="softmax temperature")
    p.add_argument("--lm", help="n-gram model file for shallow fusion")
    p.add_argument("--lm-weight", type=float)
    p.add_argument("--length-reward", type=float)
    p.add_argument("--max-emit", type=int)
    p.add_argument("--nbest", type=int)
    p.add_argument("--greedy", action="store_true", help="best-path decode")
    p.add_argument("--threads", type=int, default=1,
                   help="decode utterances in parallel; output is order-stable")

    p = sub.add_parser("score", help="corpus CER against reference transcripts")
    p.add_argument("--refs", required=True, help="reference transcript file")
    p.add_argument("--hyps", required=True, help="hypothesis file from decode")
    p.add_argument("--out", help="write the report here instead of stdout")

    p = sub.add_parser("gradcheck", help="finite-difference and oracle batteries")
    p.add_argument("--module", choices=["all", "numerics", "layers", "rnnt"],
                   default="all")
    p.add_argument("--inject-bug", choices=["tanh", "rnnt"],
                   help="test hook: corrupt one backward rule on purpose")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("curves", help="render metrics logs as an SVG line chart")
    p.add_argument("logs", nargs="+", help="metrics.tsv files")
    p.add_argument("--out", required=True, help="output .svg path")
    p.add_argument("--labels", help="comma-separated series labels")

    p = sub.add_parser("config", help="print the default configuration file")
    p.add_argument("--out", help="write instead of printing")

    return parser


# -- helpers ---------------------------------------------------------------------


def _load_config(path: str | None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _apply_data_dir(config: RunConfig, data_dir: str | None) -> None:
    if not data_dir:
        return
    d = Path(data_dir)
    config.set("data", "train_features", str(d / "train.rtfa"))
    config.set("data", "train_transcripts", str(d / "train.txt"))
    config.set("data", "val_features", str(d / "val.rtfa"))
    config.set("data", "val_transcripts", str(d / "val.txt"))
    config.set("data", "vocab", str(d / "vocab.txt"))
    config.set("data", "cmvn", str(d / "cmvn.txt"))


def _require(config: RunConfig, section: str, key: str) -> str:
    value = config.get(section, key)
    if not value:
        raise ConfigError(f"[{section}] {key} is required (set it in the config "
                          f"or pass --data)")
    return value


def _load_train_val(config: RunConfig):
    vocab = data_mod.Vocabulary.load(_require(config, "data", "vocab"))
    train = data_mod.load_dataset(_require(config, "data", "train_features"),
                                  _require(config, "data", "train_transcripts"),
                                  vocab)
    val = data_mod.load_dataset(_require(config, "data", "val_features"),
                                _require(config, "data", "val_transcripts"),
                                vocab)
    return vocab, train, val


# -- commands --------------------------------------------------------------------


def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        train, vocab = data_mod.gen_synthetic(
            args.vocab_size, args.n_train, seed=args.seed,
            stream=data_mod.STREAM_TRAIN_UTTS, noise=args.noise, prefix="train")
        val, _ = data_mod.gen_synthetic(
            args.vocab_size, args.n_val, seed=args.seed,
            stream=data_mod.STREAM_VAL_UTTS, noise=args.noise, prefix="val")
        cmvn = data_mod.fit_cmvn([u.feats for u in train])
        for utts in (train, val):
            for u in utts:
                u.feats = cmvn.apply(u.feats)
        vocab.save(out / "vocab.txt")
        cmvn.save(out / "cmvn.txt")
        data_mod.write_feature_archive(out / "train.rtfa", train)
        data_mod.write_transcripts(out / "train.txt", train, vocab)
        data_mod.write_feature_archive(out / "val.rtfa", val)
        data_mod.write_transcripts(out / "val.txt", val, vocab)
        print(f"prepared synthetic corpus: {len(train)} train / {len(val)} val "
              f"utterances, {vocab.size} symbols -> {out}")
        return 0

    # wav mode
    if not args.vocab:
        raise ConfigError("wav mode requires --vocab")
    if not args.transcripts:
        raise ConfigError("wav mode requires --transcripts")
    vocab = data_mod.Vocabulary.load(args.vocab)
    texts = data_mod.read_transcripts(args.transcripts)
    wavs = sorted(Path(args.wav_dir).glob("*.wav"))
    if not wavs:
        raise DataError(f"no wav files in {args.wav_dir}")
    utts = []
    for wav in wavs:
        uid = wav.stem
        if uid not in texts:
            raise DataError(f"no transcript for {uid}")
        samples, rate = data_mod.read_wav(wav)
        feats = data_mod.fbank(samples, rate).astype(np.float32)
        utts.append(data_mod.UtteranceRecord(uid=uid, feats=feats,
                                             transcript=vocab.encode(texts[uid])))
    cmvn = data_mod.fit_cmvn([u.feats for u in utts])
    for u in utts:
        u.feats = cmvn.apply(u.feats)
    vocab.save(out / "vocab.txt")
    cmvn.save(out / "cmvn.txt")
    data_mod.write_feature_archive(out / "train.rtfa", utts)
    data_mod.write_transcripts(out / "train.txt", utts, vocab)
    print(f"prepared {len(utts)} wav utterances -> {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    _apply_data_dir(config, args.data)
    for flag, section, key in [(args.max_epochs, "training", "max_epochs"),
                               (args.lr, "training", "lr"),
                               (args.lr_first_divisor, "training", "lr_first_divisor"),
                               (args.batch_size, "training", "batch_size"),
                               (args.stop_cer, "training", "stop_cer"),
                               (args.lm_init, "training", "lm_init")]:
        if flag is not None:
            config.set(section, key, str(flag))
    seed = resolve_seed(args.seed, config)

    vocab, train, val = _load_train_val(config)
    feat_dim = train[0].feats.shape[1]
    model = Model(config.model_config(vocab.size, feat_dim), seed=seed)
    lm_init_path = config.get("training", "lm_init")
    if lm_init_path:
        init_prediction_from_lm(model, Checkpoint.load(lm_init_path))
        print(f"prediction network initialized from {lm_init_path}")
    opts = config.train_options(seed=seed, fixed_timing=args.fixed_timing)
    trainer = Trainer(model, train, val, opts, args.out)
    reports = trainer.run(resume=args.resume, log=lambda r: print(
        f"epoch {r.epoch}: train {r.train_loss:.4f} val {r.val_loss:.4f} "
        f"lr {r.lr:.3g}"
        + (f" val_cer {r.val_cer:.4f}" if r.val_cer is not None else ""),
        flush=True))
    if reports:
        print(f"finished at epoch {reports[-1].epoch}; "
              f"best val loss {trainer.best_val:.4f}; run dir {trainer.workdir}")
    return 0


def cmd_train_lm(args) -> int:
    config = _load_config(args.config)
    _apply_data_dir(config, args.data)
    seed = resolve_seed(args.seed, config)
    vocab, train, _ = _load_train_val(config)
    feat_dim = train[0].feats.shape[1]
    lm_config = LstmLmConfig.matching_prediction(config.model_config(vocab.size,
                                                                     feat_dim))
    epochs = args.epochs if args.epochs is not None else config.get("lm", "lm_epochs")
    lm, pps = train_lstm_lm([u.transcript for u in train], lm_config, epochs=epochs,
                            seed=seed, lr=config.get("lm", "lm_lr"),
                            batch_size=config.get("lm", "lm_batch"),
                            log=lambda e, pp: print(f"epoch {e}: perplexity {pp:.4f}",
                                                    flush=True))
    lm.to_checkpoint({"vocab_hash": vocab_fingerprint(vocab)}).save(args.out)
    print(f"wrote {args.out} (final perplexity {pps[-1]:.4f})")
    return 0


def cmd_train_ngram(args) -> int:
    config = _load_config(args.config)
    _apply_data_dir(config, args.data)
    vocab = data_mod.Vocabulary.load(_require(config, "data", "vocab"))
    texts = data_mod.read_transcripts(_require(config, "data", "train_transcripts"))
    order = args.order if args.order is not None else config.get("lm", "order")
    alpha = args.alpha if args.alpha is not None else config.get("lm", "backoff")
    lm = NgramLm.train((list(text) for text in texts.values()), order=order,
                       alpha=alpha, vocab_hash=vocab_fingerprint(vocab))
    lm.save(args.out)
    print(f"wrote {args.out} ({order}-gram over {len(texts)} sentences)")
    return 0


def cmd_decode(args) -> int:
    config = _load_config(args.config)
    opts = config.decode_opts()
    if args.beam is not None:
        opts.beam = args.beam
    if args.temp is not None:
        opts.temperature = args.temp
    if args.lm_weight is not None:
        opts.lm_weight = args.lm_weight
    if args.length_reward is not None:
        opts.length_reward = args.length_reward
    if args.max_emit is not None:
        opts.max_emit = args.max_emit
    if args.nbest is not None:
        opts.nbest = args.nbest
    opts.validate()

    model = Model.from_checkpoint(Checkpoint.load(args.checkpoint))
    vocab_path = args.vocab or config.get("data", "vocab")
    if not vocab_path:
        raise ConfigError("decode needs --vocab or [data] vocab")
    vocab = data_mod.Vocabulary.load(vocab_path)
    if vocab.size != model.config.vocab_size:
        raise DataError(f"vocabulary has {vocab.size} symbols but the model "
                        f"was built for {model.config.vocab_size}")
    scorer = None
    if args.lm:
        ngram = NgramLm.load(args.lm)
        if ngram.vocab_hash and ngram.vocab_hash != vocab_fingerprint(vocab):
            raise DataError("n-gram model was trained against a different vocabulary")
        scorer = fusion_scorer(ngram, vocab)

    archive = data_mod.read_feature_archive(args.features)

    def decode_one(item):
        uid, feats = item
        stacked = prepared_features(model, feats)
        if args.greedy or (opts.beam == 1 and scorer is None):
            tokens = greedy_decode(model, stacked, temperature=opts.temperature,
                                   max_emit=opts.max_emit)
            return [(uid, 1, vocab.decode(tokens), 0.0)]
        hyps = beam_search(model, stacked, opts, scorer)
        return [(uid, rank, vocab.decode(h.tokens), h.score(opts))
                for rank, h in enumerate(hyps[:opts.nbest], 1)]

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(decode_one, archive))
    else:
        results = [decode_one(item) for item in archive]

    if opts.nbest > 1:
        write_nbest(args.out, [row for rows in results for row in rows])
    else:
        write_hypotheses(args.out, [(uid, text, score)
                                    for rows in results
                                    for uid, rank, text, score in rows if rank == 1])
    print(f"decoded {len(archive)} utterances -> {args.out}")
    return 0


def cmd_score(args) -> int:
    refs = data_mod.read_transcripts(args.refs)
    hyps = read_hypotheses(args.hyps)
    report = score_corpus(refs, hyps)
    lines = [f"{uid}\t{c:.4f}\t{edits}\t{ref_len}"
             for uid, c, edits, ref_len in report.per_utt]
    lines.append(f"CORPUS\t{report.corpus_cer:.4f}\t{report.total_edits}"
                 f"\t{report.total_ref_len}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(f"corpus CER {report.corpus_cer:.4f} over {len(report.per_utt)} utterances",
          file=sys.stderr)
    return 0


# -- gradient checking ---------------------------------------------------------------


def _numerics_checks(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    v = Tensor(rng.standard_normal(6), requires_grad=True)
    u = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    yield "matmul", lambda: ((a @ b) * (a @ b)).sum(), [a, b]
    yield "tanh", lambda: (a.tanh() * a).sum(), [a]
    yield "sigmoid", lambda: (a.sigmoid() * a).sum(), [a]
    yield "log_softmax", lambda: (log_softmax(v) * v).sum(), [v]
    yield "softmax", lambda: (softmax(v, 0.7) * v).sum(), [v]
    yield "pairwise_sum", lambda: (pairwise_sum(u, w).tanh()).sum(), [u, w]


def _layer_checks(rng):
    from .layers import Blstm, Conv2dLayer, Embedding, LstmCell, maxpool_time
    cell = LstmCell(2, 3, rng)
    xs = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    yield ("lstm_sequence", lambda: (cell.sequence(xs) * cell.sequence(xs)).sum(),
           [xs, cell.wx, cell.wh, cell.b])
    blstm = Blstm(2, 2, rng)
    ys = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    yield ("blstm", lambda: (blstm.forward(ys) * blstm.forward(ys)).sum(),
           [ys, blstm.fwd.wx, blstm.bwd.wx])
    conv = Conv2dLayer(1, 2, rng)
    img = Tensor(rng.standard_normal((6, 5, 1)), requires_grad=True)
    yield ("conv2d_maxpool",
           lambda: (maxpool_time(conv.forward(img), 2)
                    * maxpool_time(conv.forward(img), 2)).sum(),
           [img, conv.kernel, conv.bias])
    emb = Embedding(5, 3, rng)
    yield ("embedding",
           lambda: (emb.lookup_sequence([-1, 2, 4]).tanh()
                    * emb.lookup_sequence([-1, 2, 4])).sum(),
           [emb.weight])


def _run_gradcheck(module: str, seed: int, inject: str | None) -> int:
    from . import transducer as td
    failures = []

    def report(name, err, tol):
        status = "ok" if err <= tol else "FAIL"
        print(f"  {name:<18} max rel err {err:.3e}  (tol {tol:g})  {status}")
        if err > tol:
            failures.append(name)

    restore = None
    if inject == "tanh":
        # flip the sign of the tanh backward rule
        from .tensor import from_op, _accum
        orig = Tensor.tanh

        def bad_tanh(self):
            out_data = np.tanh(self.data)
            return from_op(out_data, (self,),
                           lambda g: _accum(self, -g * (1.0 - out_data ** 2)))

        Tensor.tanh = bad_tanh
        restore = ("tanh", orig)
    elif inject == "rnnt":
        orig = td.rnnt_loss

        def bad_loss(lat, validate=True):
            loss, grad = orig(lat, validate)
            return loss, -grad

        td.rnnt_loss = bad_loss
        restore = ("rnnt", orig)

    try:
        rng = make_rng(seed)
        if module in ("all", "numerics"):
            print("numerics:")
            for name, fn, wrt in _numerics_checks(rng):
                report(name, finite_difference_error(fn, wrt), 1e-4)
        if module in ("all", "layers"):
            print("layers:")
            for name, fn, wrt in _layer_checks(rng):
                report(name, finite_difference_error(fn, wrt), 1e-4)
        if module in ("all", "rnnt"):
            print("transducer loss:")
            worst_loss = 0.0
            for i in range(50):
                r = make_rng(seed, stream=20 + i)
                T, U, K = int(r.integers(1, 6)), int(r.integers(0, 4)), int(r.integers(2, 7))
                logits = r.standard_normal((T, U + 1, K))
                z = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
                lat = td.Lattice(log_probs=z, labels=r.integers(1, K, size=U))
                dp = td.rnnt_loss(lat, validate=False)[0]
                worst_loss = max(worst_loss, abs(dp - td.brute_force_loss(lat)))
            report("dp_vs_brute_force", worst_loss, 1e-8)
            worst_grad = 0.0
            for i in range(10):
                r = make_rng(seed, stream=80 + i)
                T, U, K = int(r.integers(1, 4)), int(r.integers(0, 3)), int(r.integers(2, 5))
                logits = r.standard_normal((T, U + 1, K))
                z = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
                labels = r.integers(1, K, size=U)
                zt = Tensor(z, requires_grad=True)

                def loss_fn(zt=zt, labels=labels):
                    lat = td.Lattice(log_probs=zt.data, labels=labels)
                    nll, grad = td.rnnt_loss(lat, validate=False)
                    from .tensor import from_op, _accum
                    return from_op(np.float64(nll), (zt,),
                                   lambda g: _accum(zt, g * grad))

                worst_grad = max(worst_grad,
                                 finite_difference_error(loss_fn, [zt]))
            report("loss_gradient_fd", worst_grad, 1e-5)
    finally:
        if restore is not None:
            name, orig = restore
            if name == "tanh":
                Tensor.tanh = orig
            else:
                td.rnnt_loss = orig

    if failures:
        print(f"FAILED: {', '.join(failures)}")
        raise NumericalError(f"gradient check failed for: {', '.join(failures)}")
    print("all checks passed")
    return 0


# -- SVG learning curves ---------------------------------------------------------------


def render_curves_svg(series: list[tuple[str, list[tuple[float, float]]]],
                      title: str = "loss by epoch",
                      width: int = 640, height: int = 400) -> str:
    """Tiny hand-rolled SVG line chart: one polyline per (label, points) series."""
    pad = 50
    xs = [x for _, pts in series for x, _ in pts]
    ys = [y for _, pts in series for _, y in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + 1

    def sx(x):
        return pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle" '
             f'font-family="sans-serif" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
             f'y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" '
             f'stroke="black"/>']
    for i in range(5):
        x = x_lo + (x_hi - x_lo) * i / 4
        y = y_lo + (y_hi - y_lo) * i / 4
        parts.append(f'<text x="{sx(x):.1f}" y="{height - pad + 16}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{x:.3g}</text>')
        parts.append(f'<text x="{pad - 6}" y="{sy(y):.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10">{y:.3g}</text>')
    for i, (label, pts) in enumerate(series):
        color = palette[i % len(palette)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" '
                     f'fill="{color}" font-family="sans-serif" '
                     f'font-size="11">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_curves(args) -> int:
    labels = args.labels.split(",") if args.labels else None
    if labels and len(labels) != len(args.logs):
        raise ConfigError("--labels must name each log file once")
    series = []
    for i, path in enumerate(args.logs):
        reports = read_metrics(path)
        if not reports:
            raise DataError(f"{path}: empty metrics log")
        stem = labels[i] if labels else Path(path).parent.name or Path(path).stem
        series.append((f"{stem} train", [(r.epoch, r.train_loss) for r in reports]))
        series.append((f"{stem} val", [(r.epoch, r.val_loss) for r in reports]))
    Path(args.out).write_text(render_curves_svg(series), encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def cmd_config(args) -> int:
    text = RunConfig().format()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "prepare": cmd_prepare,
        "train": cmd_train,
        "train-lm": cmd_train_lm,
        "train-ngram": cmd_train_ngram,
        "decode": cmd_decode,
        "score": cmd_score,
        "gradcheck": lambda a: _run_gradcheck(a.module, a.seed, a.inject_bug),
        "curves": cmd_curves,
        "config": cmd_config,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
