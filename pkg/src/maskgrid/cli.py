"""Command-line surface.

Subcommands: gen-data, train, decode, bench, sweep-iterations,
sweep-schedules. Every command prints its fully resolved configuration
(defaults, then config file, then flag overrides) before doing any work.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _add_shared_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--out", dest="out")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--regime", choices=["fully_nar", "iter_v1", "iter_v2", "iter_v3", "ar"], dest="regime")
    p.add_argument("--train-schedule", choices=["linear", "cosine"], dest="train_schedule")
    p.add_argument("--infer-schedule", choices=["linear", "cosine"], dest="infer_schedule")
    p.add_argument("--iterations", type=int, dest="iterations", metavar="T")
    p.add_argument("--candidates", type=int, dest="candidates", metavar="K")
    p.add_argument("--gumbel-temp", type=float, dest="gumbel_temp")
    p.add_argument("--algorithm", choices=["freeze", "revise", "ar"], dest="algorithm")
    p.add_argument("--steps", type=int, dest="total_steps")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--force", action="store_const", const=True, dest="force")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")


def _resolve(args) -> "RunConfig":
    from .config import parse_config_file, resolve_config, _coerce, ConfigError

    file_values = parse_config_file(args.config) if args.config else {}
    skip = {"config", "command", "set", "func"}
    flag_values = {k: v for k, v in vars(args).items() if k not in skip}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, _, raw = item.partition("=")
        flag_values[k.strip()] = _coerce(k.strip(), raw.strip())
    return resolve_config(file_values, flag_values)


def _print_config(cfg):
    print("resolved config:")
    for f in dataclasses.fields(cfg):
        print(f"  {f.name} = {getattr(cfg, f.name)}")


def _model_config(cfg):
    from .model import ModelConfig
    return ModelConfig(enc_layers=cfg.enc_layers, dec_layers=cfg.dec_layers,
                       width=cfg.width, heads=cfg.heads, vocab_text=cfg.vocab_text,
                       vocab_image=cfg.vocab_image, seq_len_text=cfg.seq_len_text,
                       seq_len_target=cfg.seq_len_target, dropout=cfg.dropout,
                       tie_embeddings=cfg.tie_embeddings)


def _load_or_init_bundle(cfg, rng):
    from . import checkpoint as ckpt
    from .model import init_bundle
    if cfg.checkpoint:
        bundle, opt, saved_rng, _ = ckpt.load_checkpoint(cfg.checkpoint)
        return bundle, opt, saved_rng
    return init_bundle(_model_config(cfg), rng, regime=cfg.regime), None, None


def _decode_fn(cfg):
    from . import decoding
    return {"freeze": decoding.decode_maskpredict_freeze,
            "revise": decoding.decode_maskpredict_revise,
            "ar": decoding.decode_autoregressive}[cfg.algorithm]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg) -> int:
    from . import data as synth
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = [("train", cfg.n_train, 0),
              ("val", cfg.n_val, cfg.n_train),
              ("test", cfg.n_test, cfg.n_train + cfg.n_val)]
    for name, count, start in splits:
        path = out / f"{name}.txt"
        if path.exists() and not cfg.force:
            print(f"refusing to overwrite {path} (use --force)", file=sys.stderr)
            return EXIT_IO
    for name, count, start in splits:
        records = synth.generate_corpus(cfg.seed, count, start_index=start,
                                        height=cfg.grid_height, width=cfg.grid_width,
                                        vocab=cfg.vocab_image, families=cfg.family_list())
        synth.write_corpus(records, out / f"{name}.txt")
        print(f"wrote {count} records to {out / (name + '.txt')}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    from . import checkpoint as ckpt
    from . import data as synth, training
    from .evalbench import CurveLogger
    from .masking import Schedule

    if cfg.regime == "ar" and (cfg.train_schedule != "linear" or cfg.infer_schedule != "cosine"):
        print("warning: schedule options are ignored for the AR regime", file=sys.stderr)

    train_records = synth.load_corpus(cfg.corpus_train, expected_n=cfg.seq_len_target)
    val_records = synth.load_corpus(cfg.corpus_val, expected_n=cfg.seq_len_target)

    rng = np.random.default_rng(cfg.seed)
    bundle, opt, saved_rng = _load_or_init_bundle(cfg, rng)
    if saved_rng is not None:
        rng = saved_rng

    tcfg = training.TrainConfig(
        regime=cfg.regime, batch_size=cfg.batch_size, total_steps=cfg.total_steps,
        train_schedule=Schedule.parse(cfg.train_schedule),
        opt=training.OptConfig(peak_lr=cfg.peak_lr, total_steps=cfg.total_steps,
                               warmup_ratio=cfg.warmup_ratio, beta1=cfg.beta1,
                               beta2=cfg.beta2, weight_decay=cfg.weight_decay,
                               clip_norm=cfg.clip_norm),
        eval_interval=cfg.eval_interval, log_interval=cfg.log_interval, seed=cfg.seed)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    logger = CurveLogger(out / f"curve_{cfg.regime}.csv")
    trainer = training.Trainer(bundle, tcfg, train_records, val_records, opt=opt, rng=rng)

    def on_log(row):
        logger(row)
        vl = f" val={row['val_loss']:.4f}" if "val_loss" in row else ""
        print(f"step {row['step']:>6}  loss={row['train_loss']:.4f}  lr={row['lr']:.2e}{vl}")

    remaining = cfg.total_steps - bundle.step
    while remaining > 0:
        chunk = min(cfg.checkpoint_interval, remaining)
        trainer.fit(steps=chunk, on_log=on_log)
        remaining -= chunk
        ckpt.save_checkpoint(out / f"ckpt_{cfg.regime}.emg", bundle, trainer.opt, trainer.rng)
    ckpt.save_checkpoint(out / f"ckpt_{cfg.regime}.emg", bundle, trainer.opt, trainer.rng)
    print(f"final checkpoint: {out / f'ckpt_{cfg.regime}.emg'}")
    return EXIT_OK


def cmd_decode(cfg) -> int:
    from . import data as synth, decoding
    from .masking import Schedule

    bundle, _, _ = _load_or_init_bundle(cfg, np.random.default_rng(cfg.seed))
    records = synth.load_corpus(cfg.corpus_test, expected_n=cfg.seq_len_target)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    decode_fn = _decode_fn(cfg)
    kwargs = {} if cfg.algorithm == "ar" else {
        "T_iters": cfg.iterations, "schedule": Schedule.parse(cfg.infer_schedule),
        "gumbel_temp": cfg.gumbel_temp, "sampling": cfg.sampling}

    rec = records[0]
    if cfg.candidates > 1:
        cs = decoding.sample_candidates(bundle, rec.caption, cfg.candidates,
                                        decode_fn, rng, **kwargs)
        for i, cand in enumerate(cs.candidates):
            _write_grid(out / f"candidate_{i:02d}.txt", cand, cfg.grid_width)
        (out / "selected.txt").write_text(f"{cs.selected}\n")
        print(f"wrote {cfg.candidates} candidates; selected index {cs.selected}")
    else:
        res = decode_fn(bundle, rec.caption, rng=rng, **kwargs)
        _write_grid(out / "decode.txt", res.tokens, cfg.grid_width)
        if res.reveal_trace:
            telemetry = "\n".join(
                f"iteration={t + 1}\trevealed={c}" for t, c in enumerate(res.reveal_trace))
            (out / "telemetry.txt").write_text(telemetry + "\n")
        print(f"decoded grid written to {out / 'decode.txt'}")
    return EXIT_OK


def _write_grid(path, tokens, width):
    rows = np.asarray(tokens).reshape(-1, width)
    Path(path).write_text("\n".join(" ".join(str(int(v)) for v in row) for row in rows) + "\n")


def cmd_bench(cfg) -> int:
    from . import data as synth, decoding, evalbench

    bundle, _, _ = _load_or_init_bundle(cfg, np.random.default_rng(cfg.seed))
    from .masking import Schedule
    caption = synth.generate_corpus(cfg.seed, 1, height=cfg.grid_height,
                                    width=cfg.grid_width, vocab=cfg.vocab_image)[0].caption

    nar = evalbench.bench_latency(bundle, decoding.decode_maskpredict_revise, caption,
                                  repeats=cfg.bench_repeats, warmup=cfg.bench_warmup,
                                  T_iters=cfg.iterations,
                                  schedule=Schedule.parse(cfg.infer_schedule))
    ar = evalbench.bench_latency(bundle, decoding.decode_autoregressive, caption,
                                 repeats=cfg.bench_repeats, warmup=cfg.bench_warmup)
    rows = [
        {"model": "mask_predict", "decoder_forward_passes": nar.decoder_forward_passes,
         "wall_clock": nar.wall_clock, "tokens_per_second": nar.tokens_per_second},
        {"model": "autoregressive", "decoder_forward_passes": ar.decoder_forward_passes,
         "wall_clock": ar.wall_clock, "tokens_per_second": ar.tokens_per_second},
    ]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    evalbench.write_csv(out / "bench.csv", rows)
    for r in rows:
        print(f"{r['model']}: passes={r['decoder_forward_passes']} wall={r['wall_clock']:.4f}s")
    print(f"pass ratio AR:NAR = {ar.decoder_forward_passes}:{nar.decoder_forward_passes}")
    return EXIT_OK


def cmd_sweep_iterations(cfg) -> int:
    from . import data as synth, evalbench
    from .masking import Schedule

    bundle, _, _ = _load_or_init_bundle(cfg, np.random.default_rng(cfg.seed))
    records = synth.load_corpus(cfg.corpus_test, expected_n=cfg.seq_len_target)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    rows = evalbench.sweep_iterations(
        bundle, records, T_values=cfg.sweep_T_list(), K=cfg.candidates,
        schedule=Schedule.parse(cfg.infer_schedule),
        rng=np.random.default_rng(cfg.seed),
        csv_path=Path(cfg.out) / "sweep_iterations.csv",
        height=cfg.grid_height, width=cfg.grid_width,
        gumbel_temp=cfg.gumbel_temp, sampling=cfg.sampling)
    for r in rows:
        print(f"T={r['T']:>3}  mode_match={r['mode_match']:.3f}  bigram_js={r['bigram_js']:.4f}  "
              f"passes={r['decoder_forward_passes']}")
    return EXIT_OK


def cmd_sweep_schedules(cfg) -> int:
    from . import data as synth, evalbench

    train_records = synth.load_corpus(cfg.corpus_train, expected_n=cfg.seq_len_target)
    val_records = synth.load_corpus(cfg.corpus_val, expected_n=cfg.seq_len_target)
    test_records = synth.load_corpus(cfg.corpus_test, expected_n=cfg.seq_len_target)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    rows = evalbench.sweep_schedules(
        train_records, val_records, test_records, _model_config(cfg),
        steps=cfg.sweep_steps, batch_size=cfg.batch_size, seed=cfg.seed,
        eval_T=cfg.iterations, eval_K=cfg.candidates,
        height=cfg.grid_height, width=cfg.grid_width,
        csv_path=Path(cfg.out) / "sweep_schedules.csv")
    for r in rows:
        print(r)
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    from .config import ConfigError
    from .data import CorpusFormatError
    from .checkpoint import CheckpointError
    from .tensor import NumericError

    parser = argparse.ArgumentParser(prog="maskgrid",
                                     description="iterative mask-predict token-grid generation")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "decode": cmd_decode,
        "bench": cmd_bench,
        "sweep-iterations": cmd_sweep_iterations,
        "sweep-schedules": cmd_sweep_schedules,
    }
    for name in commands:
        p = sub.add_parser(name)
        _add_shared_flags(p)

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits with status 2 on usage errors; keep that as the
        # config-error exit code instead of propagating the exception
        if e.code not in (0, None):
            return EXIT_CONFIG
        return EXIT_OK
    try:
        cfg = _resolve(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    _print_config(cfg)
    try:
        return commands[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, CorpusFormatError, FileNotFoundError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
