"""``unrolled-can`` command line entry point.

Exit codes: 0 success, 1 I/O or parse failure, 2 domain precondition
(empty corpus, single class for CAN, corrupt checkpoint, ...), 64 usage.
Settings resolve as built-in defaults < ``--config`` JSON < explicit flags.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, container
from .dataset import Corpus, Layout, TrainingSet, load_corpus, save_corpus, scan_corpus
from .errors import DomainError, EmptySet, MidiError
from .midi_codec import (
    PianoRoll,
    ValueDomain,
    decode,
    default_step_ticks,
    encode,
    grid_to_pgm,
    parse_midi,
    quantize,
    roll_to_pgm,
    segment,
)
from .models import Profile
from .novelty_gate import load_gate, save_gate, score_set, train_expert_gate, write_report
from .toy_bench import TOY_TRAIN_POINTS, MoGSpec, default_toy_config, median_by_k, run_toy, toy_training_set
from .unroll_engine import Checkpoint, TrainConfig, generate, outputs_to_rolls, train

log = logging.getLogger("unrolled_can")

EXIT_OK, EXIT_IO, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2, 64
PROFILE_FLAGS = {"image": Profile.IMAGE128, "image128": Profile.IMAGE128, "image32": Profile.IMAGE32, "toy": Profile.TOY}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


# ---------------------------------------------------------------------------
# manifests


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path: Path, command: str, config: dict, inputs: list[str], outputs: list[str],
                   seed: int | None, started: str) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    }
    container.write_atomic(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# data loading helpers


def _load_music_data(path: Path, layout: str, step_div: int, seed: int, min_classes: int = 1) -> Corpus:
    if path.is_dir():
        return scan_corpus(path, Layout(layout), step_div=step_div, split_seed=seed, min_classes=min_classes)
    return load_corpus(path)


def _load_toy_data(spec: str, seed: int) -> TrainingSet:
    if spec == "mog":
        return toy_training_set(MoGSpec.ring(), TOY_TRAIN_POINTS, seed)
    rows = np.loadtxt(spec, delimiter=",", skiprows=1, ndmin=2)
    labels = rows[:, 2].astype(np.int64) if rows.shape[1] > 2 else np.zeros(len(rows), dtype=np.int64)
    return TrainingSet(rows[:, :2].astype(np.float32), labels, int(labels.max()) + 1)


def _sample_grid_pgm(outputs: np.ndarray, cols: int = 4) -> bytes:
    rolls = outputs_to_rolls(outputs, 1)
    grids = [r.grid for r in rolls]
    rows = -(-len(grids) // cols)
    blank = -np.ones_like(grids[0])
    grids += [blank] * (rows * cols - len(grids))
    tiled = np.vstack([np.hstack(grids[r * cols:(r + 1) * cols]) for r in range(rows)])
    return grid_to_pgm(tiled, ValueDomain.SIGNED11)


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    started = _now()
    corpus = scan_corpus(args.inp, Layout(args.layout), step_div=args.step_div, split_seed=args.seed,
                         holdout_fraction=args.holdout, include_drums=args.include_drums)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out / "corpus.canroll")
    outputs = ["corpus.canroll"]
    if not args.no_previews:
        previews = out / "previews"
        previews.mkdir(exist_ok=True)
        for i, s in enumerate(corpus.samples):
            (previews / f"{i:05d}.pgm").write_bytes(roll_to_pgm(s.roll))
        outputs.append("previews/")
    meta = corpus.meta
    print(f"K={meta.K} classes={','.join(meta.class_names)} counts={','.join(map(str, meta.counts))} "
          f"samples={len(corpus.samples)} skipped={len(corpus.skipped)}")
    for path, reason in corpus.skipped:
        print(f"skipped {path}: {reason}", file=sys.stderr)
    config = {"layout": args.layout, "step_div": args.step_div, "holdout": args.holdout,
              "include_drums": args.include_drums}
    write_manifest(out / "manifest.json", "preprocess", config, [str(args.inp)], outputs, args.seed, started)
    return EXIT_OK


_TRAIN_FLAGS = {
    "objective": "objective", "k": "k", "unroll_mode": "unroll_mode", "epochs": "epochs", "seed": "seed",
    "batch_size": "batch_size", "eta_g": "eta_g", "eta_d": "eta_d", "unroll_lr": "unroll_lr",
}


def _resolve_config(args, base: dict | None = None) -> TrainConfig:
    settings = dict(base or {})
    if getattr(args, "config", None):
        settings.update(json.loads(Path(args.config).read_text()))
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            settings[key] = value
    if getattr(args, "profile", None) is not None:
        settings["profile"] = PROFILE_FLAGS[args.profile].value
    return TrainConfig.from_dict(settings)


def cmd_train(args) -> int:
    started = _now()
    cfg = _resolve_config(args)
    if cfg.profile is Profile.TOY:
        data = _load_toy_data(args.data, cfg.seed)
    else:
        min_classes = 2 if cfg.objective.value == "can" else 1
        data = _load_music_data(Path(args.data), args.layout, cfg.step_div, cfg.seed, min_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs: list[str] = []

    def on_epoch(epoch, ckpt, samples):
        name = f"checkpoint_epoch_{epoch:03d}.canroll"
        ckpt.save(out / name)
        outputs.append(name)
        arr = samples.detach().numpy()
        if cfg.profile is Profile.TOY:
            sample_name = f"samples_epoch_{epoch:03d}.csv"
            np.savetxt(out / sample_name, arr, delimiter=",", header="x,y", comments="", fmt="%.9g")
        else:
            sample_name = f"samples_epoch_{epoch:03d}.pgm"
            (out / sample_name).write_bytes(_sample_grid_pgm(arr))
        outputs.append(sample_name)
        log.info("epoch %d done", epoch)

    ckpt, train_log = train(data, cfg, on_epoch=on_epoch)
    ckpt.save(out / "checkpoint_final.canroll")
    (out / "train_log.csv").write_text(train_log.to_csv())
    outputs += ["checkpoint_final.canroll", "train_log.csv"]
    last = train_log.records[-1] if train_log.records else None
    print(f"trained {cfg.epochs} epoch(s), {len(train_log)} steps"
          + (f"; last D loss {last.discriminator['total']:.4f}, G loss {last.generator['total']:.4f}" if last else ""))
    write_manifest(out / "manifest.json", "train", cfg.to_dict(), [str(args.data)], outputs, cfg.seed, started)
    return EXIT_OK


def cmd_generate(args) -> int:
    started = _now()
    ckpt = Checkpoint.load(args.ckpt)
    rolls, midis = generate(ckpt, args.n, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, (roll, midi) in enumerate(zip(rolls, midis)):
        (out / f"piece_{i:03d}.mid").write_bytes(midi)
        (out / f"piece_{i:03d}.pgm").write_bytes(roll_to_pgm(roll.binarize(0.0)))
        outputs += [f"piece_{i:03d}.mid", f"piece_{i:03d}.pgm"]
    print(f"wrote {len(midis)} piece(s) to {out}")
    write_manifest(out / "manifest.json", "generate", {"n": args.n, "checkpoint_config": ckpt.config},
                   [str(args.ckpt)], outputs, args.seed, started)
    return EXIT_OK


def _target_rolls(target: Path, step_div: int) -> tuple[list[PianoRoll], list[str]]:
    rolls, ids = [], []
    files = sorted(p for p in target.iterdir() if p.suffix.lower() in (".mid", ".midi")) if target.is_dir() else [target]
    for path in files:
        song = parse_midi(path.read_bytes())
        step = default_step_ticks(song.ppq, step_div)
        song = quantize(song, step)
        windows = segment(song, step) or [encode(song, 0, step)]
        for w, roll in enumerate(windows):
            rolls.append(roll)
            ids.append(path.name if len(windows) == 1 else f"{path.name}#{w}")
    return rolls, ids


def cmd_score(args) -> int:
    started = _now()
    inputs = [str(args.target)]
    if args.gate:
        gate, gate_mse = load_gate(args.gate)
        inputs.append(str(args.gate))
        config = {"gate": str(args.gate)}
    else:
        cfg = _resolve_config(args, {"profile": Profile.IMAGE32.value, "epochs": 30, "batch_size": 32})
        data = _load_music_data(Path(args.data), args.layout, cfg.step_div, cfg.seed)
        gate, gate_mse = train_expert_gate(data, cfg)
        inputs.append(str(args.data))
        config = cfg.to_dict()
        if args.save_gate:
            save_gate(gate, args.save_gate, gate_mse)
    target = Path(args.target)
    rolls, ids = _target_rolls(target, args.step_div)
    if not rolls:
        raise EmptySet(f"no MIDI files to score in {target}")
    report = score_set(gate, rolls, gate_mse, ids)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    json_path = out.with_suffix(".json")
    write_report(report, out, json_path)
    print(f"n={report.n} mean={report.mean:.6f} max={report.max:.6f} gate_train_mse={report.gate_train_mse:.6f}")
    write_manifest(out.with_suffix(".manifest.json"), "score", config, inputs,
                   [out.name, json_path.name], getattr(args, "seed", None), started)
    return EXIT_OK


def cmd_toy(args) -> int:
    started = _now()
    seeds = list(range(args.seeds))
    extra = {"epochs": args.epochs} if args.epochs is not None else {}
    variants = [default_toy_config(k=k, objective=args.objective, **extra) for k in args.k_list]
    out = Path(args.out)
    reports = run_toy(variants, MoGSpec.ring(), seeds, out)
    for r in reports:
        print(f"{r.variant} k={r.k} seed={r.seed} modes={r.modes_covered} hq={r.hq_fraction:.3f}")
    modes, hq = median_by_k(reports, "modes_covered"), median_by_k(reports, "hq_fraction")
    for k in modes:
        print(f"median k={k}: modes={modes[k]} hq={hq[k]:.3f}")
    config = {"k_list": args.k_list, "seeds": seeds, "objective": args.objective, "train": variants[0].to_dict()}
    write_manifest(out / "manifest.json", "toy", config, [], ["toy_results.csv"], None, started)
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    started = _now()
    song = parse_midi(Path(args.inp).read_bytes())
    step = default_step_ticks(song.ppq, args.step_div)
    song = quantize(song, step)
    diff = 0
    windows = segment(song, step)
    for roll in windows:
        again = encode(decode(roll, 0.5, song.ppq), 0, step)
        diff += int((again.grid != roll.grid).sum())
    print(f"windows={len(windows)} notes={len(song.notes)} cell_diff={diff}")
    if args.manifest:
        write_manifest(Path(args.manifest), "roundtrip", {"step_div": args.step_div}, [str(args.inp)], [],
                       None, started)
    return EXIT_OK if diff == 0 else EXIT_DOMAIN


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unrolled-can", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="convert a MIDI corpus into a roll container")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layout", choices=[l.value for l in Layout], default="per-class")
    p.add_argument("--step-div", type=_positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--include-drums", action="store_true")
    p.add_argument("--no-previews", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a GAN/CAN, optionally unrolled")
    p.add_argument("--data", required=True, help="corpus dir, corpus container, or for toy: 'mog' / points CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--objective", choices=["gan", "can"])
    p.add_argument("--k", type=int)
    p.add_argument("--unroll-mode", choices=["full", "stopgrad"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=sorted(PROFILE_FLAGS))
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--eta-g", type=float)
    p.add_argument("--eta-d", type=float)
    p.add_argument("--unroll-lr", type=float)
    p.add_argument("--layout", choices=[l.value for l in Layout], default="per-class")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample pieces from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("score", help="novelty scores from an expert-gate autoencoder")
    gate = p.add_mutually_exclusive_group(required=True)
    gate.add_argument("--gate")
    gate.add_argument("--train-gate", action="store_true")
    p.add_argument("--data")
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--save-gate")
    p.add_argument("--config")
    p.add_argument("--profile", choices=["image", "image128", "image32"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--step-div", type=_positive_int, default=4)
    p.add_argument("--layout", choices=[l.value for l in Layout], default="per-class")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("toy", help="mode-coverage benchmark on an 8-mode ring")
    p.add_argument("--k-list", type=_int_list, default=[0, 1, 5, 10])
    p.add_argument("--seeds", type=_positive_int, default=5)
    p.add_argument("--objective", choices=["gan", "can"], default="gan")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("roundtrip", help="check the encode/decode fixed point on one MIDI file")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--step-div", type=_positive_int, default=4)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_roundtrip)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "score" and args.train_gate and not args.data:
        print("unrolled-can score: error: --train-gate requires --data", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (MidiError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
