"""Command-line entry point.

Subcommands: gen-corpus, pretrain, finetune, sample, tokenize, analyze.
Every command is a pure function of (config, input files, seed): randomness
comes from generators derived from the seed with fixed stream ids, and each
command writes its fully-resolved config next to its outputs.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import autodiff as ad
from . import data as dat
from . import quantize as qz
from . import sampler as smp
from . import trainer as tr
from .config import (
    ConfigError,
    build_model_config,
    build_train_config,
    load_config,
    resolve,
    save_resolved,
)
from .model import JointModel

# rng stream ids per purpose, combined with the run seed
_STREAM_CORPUS = 0
_STREAM_MODEL = 1
_STREAM_TRAIN = 2
_STREAM_SAMPLE = 3
_STREAM_KMEANS = 4
_STREAM_ANALYSIS = 5


def _rng(seed: int, stream: int, *extra) -> np.random.Generator:
    return np.random.default_rng([seed, stream, *extra])


def _corpus_params(config: dict) -> dat.CorpusParams:
    d = config["data"]
    return dat.CorpusParams(
        n_utterances=d["n_utterances"],
        d_x=d["d_x"],
        n_phones=d["n_phones"],
        n_speakers=d["n_speakers"],
        min_len=d["min_len"],
        max_len=d["max_len"],
        segment_mean=d["segment_mean"],
        noise_scale=d["noise_scale"],
        speaker_scale=d["speaker_scale"],
    )


def _load_or_generate_corpus(config: dict) -> dat.SyntheticCorpus:
    path = config["data"]["corpus"]
    if path is not None:
        corpus = dat.read_corpus(path)
        if corpus.d_x != config["data"]["d_x"]:
            raise ConfigError(
                f"corpus {path} has d_x={corpus.d_x} but config says {config['data']['d_x']}"
            )
        return corpus
    return dat.generate_corpus(_corpus_params(config), _rng(config["seed"], _STREAM_CORPUS))


def _normalize_with_model(corpus: dat.SyntheticCorpus, model: JointModel) -> dat.SyntheticCorpus:
    utts = [
        dat.Utterance(
            features=model.normalize(u.features.astype(np.float64)).astype(np.float32),
            phones=u.phones,
            speaker=u.speaker,
        )
        for u in corpus.utterances
    ]
    return dat.SyntheticCorpus(
        utterances=utts,
        d_x=corpus.d_x,
        n_phones=corpus.n_phones,
        n_speakers=corpus.n_speakers,
        params=corpus.params,
    )


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _write_metrics(path, rows, n_codebooks: int) -> None:
    header = ["step", "lr", "loss_total", "loss_encoder", "loss_decoder", "grad_norm", "drop_frac"]
    header += [f"ppl_cb{k}" for k in range(n_codebooks)]
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[h]) for h in header) + "\n")


def _load_model(path: str) -> tuple:
    ckpt = tr.load_checkpoint(path)
    return tr.restore_model(ckpt), ckpt


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> int:
    config = resolve(load_config(args.config, args.set or ()))
    corpus = dat.generate_corpus(_corpus_params(config), _rng(config["seed"], _STREAM_CORPUS))
    dat.write_corpus(args.out, corpus)
    save_resolved(config, str(args.out) + ".config.json")
    n_frames = sum(len(u) for u in corpus.utterances)
    print(f"wrote {len(corpus)} utterances ({n_frames} frames, d_x={corpus.d_x}) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    config = resolve(load_config(args.config, args.set or ()))
    os.makedirs(args.out_dir, exist_ok=True)
    save_resolved(config, os.path.join(args.out_dir, "config.json"))
    corpus = _load_or_generate_corpus(config)
    tcfg = build_train_config(config, "pretrain")

    if args.resume:
        ckpt = tr.load_checkpoint(args.resume)
        if ckpt.config != config:
            raise tr.CheckpointError(
                f"{args.resume}: stored config differs from the requested one; "
                "resume requires the identical resolved config"
            )
        state = tr.restore_training(ckpt, tcfg)
        corpus_n = _normalize_with_model(corpus, state.model)
    else:
        mcfg = build_model_config(config)
        model = JointModel.create(mcfg, _rng(config["seed"], _STREAM_MODEL))
        corpus_n, stats = dat.normalize(corpus)
        model.norm_mean, model.norm_std = stats.mean, stats.std
        state = tr.TrainerState.create(model, tcfg, rng=_rng(config["seed"], _STREAM_TRAIN))

    remaining = tcfg.total_steps - state.step
    if remaining <= 0:
        raise ConfigError(f"nothing to do: checkpoint already at step {state.step}")
    if args.steps is not None:
        remaining = min(remaining, args.steps)
    rows = tr.train(state, corpus_n, remaining)
    _write_metrics(os.path.join(args.out_dir, "metrics.csv"), rows, state.model.cfg.n_targets)
    tr.save_checkpoint(
        os.path.join(args.out_dir, "checkpoint.bin"),
        tr.state_arrays(state),
        state.step,
        state.rng.bit_generator.state,
        config,
    )
    print(
        f"pretrained {remaining} steps: final encoder loss {rows[-1]['loss_encoder']:.4f}, "
        f"decoder loss {rows[-1]['loss_decoder']:.4f}"
    )
    return 0


def _select_semantic_layer(config, model, layer_frames, phones) -> int:
    fixed = config["tokenize"]["semantic_layer"]
    if fixed is not None:
        if not 0 <= fixed < model.cfg.encoder.layers:
            raise ConfigError(f"semantic_layer {fixed} out of range")
        return fixed
    k = config["tokenize"]["k_semantic"]
    max_iter = config["tokenize"]["kmeans_max_iter"]
    best, best_mi = 0, -1.0
    for i, frames in enumerate(layer_frames):
        km = qz.kmeans_fit(frames, k, _rng(config["seed"], _STREAM_KMEANS, 2, i), max_iter=max_iter)
        mi = qz.mutual_information(km.assign(frames), phones)
        if mi > best_mi:
            best, best_mi = i, mi
    return best


def cmd_finetune(args) -> int:
    config = resolve(load_config(args.config, args.set or ()))
    os.makedirs(args.out_dir, exist_ok=True)
    save_resolved(config, os.path.join(args.out_dir, "config.json"))
    model, _ = _load_model(args.checkpoint)
    corpus = _load_or_generate_corpus(config)
    corpus_n = _normalize_with_model(corpus, model)
    phase = {"tts": "finetune-tts", "tokenize": "finetune-tokenize"}[args.mode]
    tcfg = build_train_config(config, phase)

    if args.mode == "tts":
        if corpus.n_phones > model.cfg.n_phones:
            raise ConfigError(
                f"corpus has {corpus.n_phones} phone labels, model embeds {model.cfg.n_phones}"
            )
        model.add_conditioning_params(_rng(config["seed"], _STREAM_MODEL))
    else:
        _, layer_frames, phones, _ = qz.collect_layer_frames(model, corpus_n)
        sem_layer = _select_semantic_layer(config, model, layer_frames, phones)
        sem_model = qz.kmeans_fit(
            layer_frames[sem_layer],
            config["tokenize"]["k_semantic"],
            _rng(config["seed"], _STREAM_KMEANS, 0),
            max_iter=config["tokenize"]["kmeans_max_iter"],
        )
        sem_model.layer_index = sem_layer
        model.extras["tok.layer"] = sem_layer
        model.extras["tok.semantic"] = sem_model
        if config["tokenize"]["residual"]:
            cond_w = [model.params[f"cond.w{j}"].data for j in range(model.cfg.encoder.layers)]
            rest = qz.residual_sum(layer_frames, cond_w, sem_layer)
            model.extras["tok.residual"] = qz.kmeans_fit(
                rest,
                config["tokenize"]["k_residual"],
                _rng(config["seed"], _STREAM_KMEANS, 1),
                max_iter=config["tokenize"]["kmeans_max_iter"],
            )

    state = tr.TrainerState.create(model, tcfg, rng=_rng(config["seed"], _STREAM_TRAIN))
    rows = tr.train(state, corpus_n, tcfg.total_steps)
    _write_metrics(os.path.join(args.out_dir, "metrics.csv"), rows, model.cfg.n_targets)
    tr.save_checkpoint(
        os.path.join(args.out_dir, "checkpoint.bin"),
        tr.state_arrays(state),
        state.step,
        state.rng.bit_generator.state,
        config,
    )
    print(f"fine-tuned ({args.mode}) {tcfg.total_steps} steps: final loss {rows[-1]['loss_total']:.4f}")
    return 0


def _read_phone_lines(path):
    lines = []
    with open(path) as f:
        for raw in f:
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            lines.append(np.array([int(v) for v in raw.split()], dtype=np.int64))
    if not lines:
        raise ConfigError(f"{path}: no phone id lines found")
    return lines


def cmd_sample(args) -> int:
    config = resolve(load_config(args.config, args.set or ()))
    model, _ = _load_model(args.checkpoint)
    s = config["sampling"]
    solver = smp.SolverConfig(
        step_size=args.step_size if args.step_size is not None else s["step_size"],
        guidance=args.guidance if args.guidance is not None else s["guidance"],
        guidance_formula=s["guidance_formula"],
    )
    seed = config["seed"] if args.seed is None else args.seed

    jobs = []  # (length, z_cond or None, condition or None, phones-for-output)
    if args.phones:
        if "ft.phone_emb" not in model.params:
            raise tr.CheckpointError(
                f"{args.checkpoint} has no conditional fine-tuning parameters; "
                "sample with --phones requires a tts fine-tuned checkpoint"
            )
        for ids in _read_phone_lines(args.phones):
            if ids.min() < 0 or ids.max() >= model.cfg.n_phones:
                raise ConfigError(f"phone id out of range [0, {model.cfg.n_phones})")
            jobs.append((len(ids), None, smp.ConditionSet(phone_ids=ids), ids))
    elif args.corpus:
        src = dat.read_corpus(args.corpus)
        use_tokens = "tok.semantic" in model.extras
        for u in src.utterances:
            x = model.normalize(u.features.astype(np.float64)).astype(model.cfg.dtype)
            with ad.no_grad():
                layers = model.student_layers(x)
            if use_tokens:
                cond_w = [model.params[f"cond.w{j}"].data for j in range(model.cfg.encoder.layers)]
                z, _, _ = qz.quantize_condition(
                    [l.data for l in layers],
                    cond_w,
                    model.extras["tok.layer"],
                    model.extras["tok.semantic"],
                    model.extras.get("tok.residual"),
                )
            else:
                z = model.condition(layers).data
            jobs.append((len(u), z, None, u.phones))
    else:
        if args.n < 1 or args.length < 1:
            raise ConfigError("unconditional sampling needs -n >= 1 and --length >= 1")
        jobs = [(args.length, None, None, None) for _ in range(args.n)]

    utts = []
    report = None
    for i, (length, z, cond, phones) in enumerate(jobs):
        feats, report = smp.generate(
            model, length, solver, _rng(seed, _STREAM_SAMPLE, i), condition=cond, z_cond=z
        )
        feats = model.denormalize(feats.astype(np.float64)).astype(np.float32)
        if phones is None:
            phones = np.zeros(length, dtype=np.int64)
        utts.append(dat.Utterance(features=feats, phones=phones, speaker=0))

    out = dat.SyntheticCorpus(
        utterances=utts, d_x=model.cfg.d_x, n_phones=model.cfg.n_phones, n_speakers=1
    )
    dat.write_corpus(args.out, out)
    save_resolved(config, str(args.out) + ".config.json")
    print(
        f"sampled {len(utts)} utterances -> {args.out}\n"
        f"NFE per sample: {report.nfe} "
        f"({report.steps} midpoint steps, {report.decoder_forwards} decoder forwards)"
    )
    return 0


def cmd_tokenize(args) -> int:
    config = resolve(load_config(args.config, args.set or ()))
    model, _ = _load_model(args.checkpoint)
    corpus = dat.read_corpus(args.corpus)
    corpus_n = _normalize_with_model(corpus, model)
    k = args.k if args.k is not None else config["tokenize"]["k_semantic"]
    k_res = config["tokenize"]["k_residual"]
    residual = args.residual or config["tokenize"]["residual"]
    rate = config["tokenize"]["frame_rate_hz"]
    max_iter = config["tokenize"]["kmeans_max_iter"]

    _, layer_frames, phones, _ = qz.collect_layer_frames(model, corpus_n)
    stored = model.extras.get("tok.semantic")
    if stored is not None and stored.k == k:
        sem_layer = model.extras["tok.layer"]
        sem_model = stored
        res_model = model.extras.get("tok.residual") if residual else None
        if residual and res_model is None:
            raise ConfigError("checkpoint has no residual codebook; re-run finetune with residual")
    else:
        if "tok.layer" in model.extras:
            sem_layer = model.extras["tok.layer"]
        else:
            sem_layer = _select_semantic_layer(config, model, layer_frames, phones)
        sem_model = qz.kmeans_fit(
            layer_frames[sem_layer], k, _rng(config["seed"], _STREAM_KMEANS, 0),
            max_iter=max_iter,
        )
        res_model = None
        if residual:
            cond_w = [model.params[f"cond.w{j}"].data for j in range(model.cfg.encoder.layers)]
            rest = qz.residual_sum(layer_frames, cond_w, sem_layer)
            res_model = qz.kmeans_fit(
                rest, k_res, _rng(config["seed"], _STREAM_KMEANS, 1), max_iter=max_iter
            )

    sizes = [sem_model.k] + ([res_model.k] if res_model is not None else [])
    cond_w = [model.params[f"cond.w{j}"].data for j in range(model.cfg.encoder.layers)]
    streams = []
    for u in corpus_n.utterances:
        with ad.no_grad():
            layers = [l.data for l in model.student_layers(u.features)]
        _, sem_tokens, res_tokens = qz.quantize_condition(
            layers, cond_w, sem_layer, sem_model, res_model
        )
        streams.append(
            qz.TokenStream(
                semantic=sem_tokens, residual=res_tokens, frame_rate=rate, codebook_sizes=sizes
            )
        )
    qz.write_tokens(args.out, streams)
    save_resolved(config, str(args.out) + ".config.json")
    bps = qz.bitrate(streams[0])
    print(
        f"tokenized {len(streams)} utterances with semantic layer {sem_layer}, "
        f"codebooks {sizes} at {rate:g} Hz -> {args.out}\nbitrate: {bps:g} bps"
    )
    return 0


def cmd_analyze(args) -> int:
    config = resolve(load_config(args.config, args.set or ()))
    model, _ = _load_model(args.checkpoint)
    corpus = dat.read_corpus(args.corpus)
    corpus_n = _normalize_with_model(corpus, model)
    k = args.k if args.k is not None else config["analysis"]["k"]
    report = qz.layer_mi_report(
        model, corpus_n, k, _rng(config["seed"], _STREAM_ANALYSIS),
        max_iter=config["analysis"]["kmeans_max_iter"],
    )
    with open(args.out, "w") as f:
        f.write("layer,mi_phone_bits,mi_speaker_bits\n")
        for row in report.rows:
            f.write(f"{row.layer},{_fmt(row.mi_phone)},{_fmt(row.mi_speaker)}\n")
    save_resolved(config, str(args.out) + ".config.json")
    print(f"{'layer':>6}  {'MI(phone)':>10}  {'MI(speaker)':>12}")
    for row in report.rows:
        print(f"{row.layer:>6}  {row.mi_phone:>10.4f}  {row.mi_speaker:>12.4f}")
    print(f"best phone layer: {report.best_phone_layer()}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a config value, e.g. --set training.total_steps=500",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowdistill",
        description="Joint self-distillation and flow-matching over feature sequences.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus file")
    _add_common(p)
    p.add_argument("--out", required=True, help="output corpus path")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="joint pre-training run")
    _add_common(p)
    p.add_argument("--out-dir", required=True, help="directory for checkpoint, metrics, config")
    p.add_argument("--resume", help="checkpoint to resume from (same resolved config)")
    p.add_argument("--steps", type=int, help="run at most this many steps this invocation")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune from a pre-trained checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True, choices=("tts", "tokenize"))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="generate feature sequences from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output corpus path")
    p.add_argument("--phones", help="phone-id condition file (tts checkpoints)")
    p.add_argument("--corpus", help="corpus to resynthesize (conditions on the encoder)")
    p.add_argument("-n", type=int, default=1, help="unconditional sample count")
    p.add_argument("--length", type=int, default=80, help="unconditional sample length")
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("tokenize", help="discretize a corpus through the encoder bottleneck")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output token file")
    p.add_argument("--k", type=int, default=None, help="semantic codebook size")
    p.add_argument("--residual", action="store_true", help="add the residual codebook stream")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("analyze", help="layer-wise mutual information report")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--k", type=int, default=None, help="units per layer for quantization")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 1
    except (tr.CheckpointError, tr.TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
