"""Command-line entry point.

Commands: ``synth`` (generate a synthetic corpus), ``train``,
``upsample``, ``evaluate``, ``check``. Exit codes: 0 success, 1 config
error, 2 data error, 3 numeric abort, 4 self-check failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data, dsp, metrics, model, tensor as tt, training
from .config import RunConfig, load_config, render_config
from .errors import ConfigError, DataError, NumericError, UpbandError
from .pipeline import upsample_buffer


def _echo(cfg: RunConfig, run_dir: Path | None = None) -> None:
    text = render_config(cfg)
    print(text)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config_effective.cfg").write_text(text, encoding="utf-8")


def _collect_overrides(args) -> dict:
    overrides = {}
    if args.max_steps is not None:
        overrides["train.max_steps"] = args.max_steps
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "corpus", None):
        overrides["paths.corpus"] = args.corpus
    if getattr(args, "run_dir", None):
        overrides["paths.run_dir"] = args.run_dir
    return overrides


def _load_split(cfg: RunConfig):
    corpus_dir = Path(cfg.paths.corpus)
    manifest = corpus_dir / "manifest.txt"
    if not corpus_dir.is_dir() or not manifest.exists():
        raise DataError(f"corpus not found at {corpus_dir} (expected manifest.txt)")
    corpus, _ = data.load_manifest(corpus_dir, manifest)
    tag = cfg.data.heldout_tag or None
    return data.split_corpus(corpus, heldout_fraction=cfg.data.heldout_fraction,
                             heldout_tag=tag, seed=cfg.train.seed)


def cmd_synth(args) -> int:
    corpus = data.synth_corpus(args.seed, args.files, args.duration, args.out)
    print(f"wrote {len(corpus.items)} files to {corpus.root}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, preset=args.preset, overrides=_collect_overrides(args))
    run_dir = Path(cfg.paths.run_dir)
    _echo(cfg, run_dir)
    train_corpus, heldout = _load_split(cfg)
    examples = data.load_examples(train_corpus, exclude=heldout)
    final = training.train_loop(examples, cfg.generator, cfg.discriminator, cfg.train,
                                run_dir, resume_from=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def _load_model_fn(checkpoint: str, cfg: RunConfig):
    state = training.load_checkpoint(checkpoint, cfg.generator, cfg.discriminator, cfg.train)
    return model.make_generator_fn(state.params, cfg.generator)


def cmd_upsample(args) -> int:
    cfg = load_config(args.config, preset=args.preset)
    _echo(cfg)
    audio = data.read_wav(args.input)
    if audio.sample_rate != 22050:
        raise DataError(f"upsample: expected 22050 Hz input, got {audio.sample_rate} Hz")
    if not args.bypass_model and args.checkpoint is None:
        raise ConfigError("upsample: need --checkpoint or --bypass-model")
    model_fn = None if args.bypass_model else _load_model_fn(args.checkpoint, cfg)
    out = upsample_buffer(audio, model_fn)
    data.write_wav(args.output, out)
    print(f"wrote {args.output}: {len(out)} samples at {out.sample_rate} Hz")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, preset=args.preset, overrides=_collect_overrides(args))
    _echo(cfg)
    train_corpus, heldout = _load_split(cfg)
    if not args.baseline and args.checkpoint is None:
        raise ConfigError("evaluate: need --checkpoint or --baseline")
    model_fn = None if args.baseline else _load_model_fn(args.checkpoint, cfg)
    report = metrics.evaluate_corpus(model_fn, heldout.paths(), data.read_wav, cfg.lsd,
                                     train_files=train_corpus.paths())
    label = "baseline" if args.baseline else "model"
    print(report.as_table(label))
    print(report.as_kv())
    return 0


# ---------------------------------------------------------------------------
# self-check suites


def _suite_gradcheck(corrupt: bool = False):
    rng = np.random.default_rng(7)
    cases = [
        ("matmul", lambda ins: tt.tsum(tt.matmul(ins[0], ins[1])),
         [(3, 4), (4, 2)]),
        ("conv1d_grouped", lambda ins: tt.tsum(
            tt.conv1d_grouped(ins[0], ins[1], ins[2], stride=2, padding=1, groups=4)),
         [(8, 12), (8, 2, 4), (8,)]),
        ("softmax", lambda ins: tt.tsum(tt.mul(tt.softmax(ins[0]), ins[1])),
         [(4, 6), (4, 6)]),
        ("layer_norm", lambda ins: tt.tsum(tt.mul(
            tt.layer_norm(ins[0], ins[1], ins[2]), ins[3])),
         [(3, 8), (8,), (8,), (3, 8)]),
    ]
    for name, fn, shapes in cases:
        inputs = [tt.Tensor(rng.normal(size=s), requires_grad=True, dtype=np.float64)
                  for s in shapes]
        if corrupt:
            # negative-control hook: skew the analytic gradient and make sure
            # the comparison trips
            tt.reset_tape()
            loss = fn(inputs)
            tt.backward(loss)
            inputs[0].grad = inputs[0].grad + 1.0
            numeric = tt.numeric_gradient(fn, inputs)
            if np.max(np.abs(inputs[0].grad - numeric[0])) > 1e-6:
                raise NumericError(f"gradcheck: corrupted gradient detected in {name}")
        tt.check_gradients(fn, inputs, rel_tol=1e-6)


def _suite_stft_roundtrip():
    rng = np.random.default_rng(11)
    x = rng.normal(size=44100) * 0.1
    y = dsp.istft(dsp.stft(dsp.AudioBuffer(x, 44100)))
    n = min(len(y), len(x))
    c = slice(1024, n - 1024)
    err = np.linalg.norm(y.samples[c] - x[c]) / np.linalg.norm(x[c])
    if err > 1e-4:
        raise NumericError(f"stft roundtrip: relative error {err:.2e} > 1e-4")


def _suite_sinc():
    sr, n = 22050, 22050
    t = np.arange(n) / sr
    x = 0.5 * np.sin(2 * np.pi * 1000 * t)
    up = dsp.sinc_upsample(dsp.AudioBuffer(x, sr), 2)
    t2 = np.arange(2 * n) / (2 * sr)
    ref = 0.5 * np.sin(2 * np.pi * 1000 * t2)
    c = slice(int(0.1 * 2 * n), int(0.9 * 2 * n))
    err = np.max(np.abs(up.samples[c] - ref[c]))
    if err > 1e-3:
        raise NumericError(f"sinc: 1 kHz tone max error {err:.2e} > 1e-3")


def _suite_lsd():
    rng = np.random.default_rng(3)
    for _ in range(3):
        x = dsp.AudioBuffer(rng.normal(size=16384) * 0.2, 44100)
        y = dsp.AudioBuffer(rng.normal(size=16384) * 0.2, 44100)
        fast, direct = metrics.lsd(x, y), metrics.lsd_direct(x, y)
        if abs(fast - direct) > 1e-9:
            raise NumericError(f"lsd: optimized vs direct differ by {abs(fast - direct):.2e}")


def _suite_spectral_norm():
    rng = np.random.default_rng(5)
    state = model.SpectralNormState()
    state.init("w", 16, rng)
    w = tt.Tensor(rng.normal(size=(16, 16)), requires_grad=True)
    for _ in range(50):
        model.spectral_normalize(w, state, "w", update=True)
    normalized = model.spectral_normalize(w, state, "w", update=False)
    sigma = np.linalg.svd(normalized.data, compute_uv=False)[0]
    if not 0.95 <= sigma <= 1.05:
        raise NumericError(f"spectral norm: sigma {sigma:.4f} outside [0.95, 1.05]")


def _suite_group_independence():
    rng = np.random.default_rng(9)
    for g in (4, 16, 64):
        c, t = 64, 16
        x = rng.normal(size=(c, t)).astype(np.float32)
        w = tt.Tensor(rng.normal(size=(c, c // g, 4)).astype(np.float32))
        b = tt.Tensor(np.zeros(c, dtype=np.float32))
        with tt.no_grad():
            base = tt.conv1d_grouped(tt.Tensor(x), w, b, stride=2, padding=1, groups=g).data
            x2 = x.copy()
            x2[c // g:2 * c // g] += 1.0  # perturb group 1 only
            out2 = tt.conv1d_grouped(tt.Tensor(x2), w, b, stride=2, padding=1, groups=g).data
        changed = np.any(base != out2, axis=1)
        expect = np.zeros(c, dtype=bool)
        expect[c // g:2 * c // g] = True
        if not np.array_equal(np.nonzero(changed)[0], np.nonzero(expect)[0]):
            raise NumericError(f"group independence violated at groups={g}")


_SUITES = [
    ("gradcheck", _suite_gradcheck),
    ("stft_roundtrip", _suite_stft_roundtrip),
    ("sinc_oracle", _suite_sinc),
    ("lsd_oracle", _suite_lsd),
    ("spectral_norm", _suite_spectral_norm),
    ("group_independence", _suite_group_independence),
]


def cmd_check(args) -> int:
    for name, suite in _SUITES:
        try:
            if name == "gradcheck":
                suite(corrupt=args.corrupt_gradient)
            else:
                suite()
        except Exception as exc:
            print(f"{name}: FAIL ({exc})")
            return 4
        print(f"{name}: ok")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="upband",
                                     description="Neural audio upsampling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps=True):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--preset", default="default", help="default or desk")
        if steps:
            p.add_argument("--max-steps", type=int, default=None)
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--corpus", default=None)
            p.add_argument("--run-dir", default=None)

    p = sub.add_parser("synth", help="generate a synthetic training corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--files", type=int, default=60)
    p.add_argument("--duration", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="adversarial training")
    common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("upsample", help="22050 Hz wav in, 44100 Hz wav out")
    common(p, steps=False)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--bypass-model", action="store_true",
                   help="pure interpolation baseline, no checkpoint needed")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(fn=cmd_upsample)

    p = sub.add_parser("evaluate", help="LSD/SNR report on the held-out split")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--baseline", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("check", help="run the invariant self-check suites")
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except UpbandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
