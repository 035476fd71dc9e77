"""Command-line entry point: ``sound-selector <command>``.

Exit codes: 0 success, 1 usage error, 2 runtime or domain error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from dataclasses import fields
from pathlib import Path

import numpy as np

from .audio import read_wav, resample, write_wav
from .errors import CheckpointError, ConfigurationError, InvalidArgumentError, NonFiniteLossError
from .evaluate import eval_mixture_baseline, eval_pit_oracle, eval_removal, eval_selection, format_table
from .nets import PitConfig, SelectorConfig, forward, load_checkpoint
from .signal import class_vector
from .synth import CorpusIndex, SceneConfig, build_dataset
from .train import TrainConfig, fit, manifest_num_classes

log = logging.getLogger("sound_selector")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _flag(name):
    return "--" + name.replace("_", "-")


def read_config_file(path):
    """JSON object or flat ``key=value`` lines; ``model.<field>`` keys go to the model config."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigurationError(f"{path}: expected key=value, got {line!r}")
            try:
                data[key.strip()] = json.loads(value.strip())
            except json.JSONDecodeError:
                data[key.strip()] = value.strip()
    train = dict(data.get("train", {}))
    model = dict(data.get("model", {}))
    for key, value in data.items():
        if key in ("train", "model"):
            continue
        if key.startswith("model."):
            model[key[len("model."):]] = value
        else:
            train[key] = value
    return train, model


def _parse_classes(text, num_classes, names=None):
    out = []
    for token in text.split(","):
        token = token.strip()
        if names and token in names:
            out.append(names.index(token))
            continue
        try:
            idx = int(token)
        except ValueError:
            raise InvalidArgumentError(f"unknown class {token!r}; valid indices are 0..{num_classes - 1}") from None
        if not 0 <= idx < num_classes:
            raise InvalidArgumentError(f"class index {idx} out of range; valid indices are 0..{num_classes - 1}")
        out.append(idx)
    return out


# -- commands ------------------------------------------------------------------

def cmd_synth_data(args):
    cfg = {}
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
    if args.policy != "custom":
        cfg["class_policy"] = args.policy
    elif "class_policy" not in cfg or isinstance(cfg["class_policy"], str):
        raise UsageError("--policy custom needs a config file with a list-valued class_policy")
    for key in ("duration_s", "num_events", "num_targets"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    config = SceneConfig.from_dict(cfg)
    if args.foreground_dir:
        if not args.background_dir:
            raise UsageError("--foreground-dir needs --background-dir")
        corpus = CorpusIndex.from_directory(args.foreground_dir, args.background_dir)
    else:
        corpus = CorpusIndex.synthetic(args.num_classes, seed=args.corpus_seed)
    records = build_dataset(config, corpus, args.out, args.count, seed=args.seed, split=args.split)
    hist = Counter(len(r["active_classes"]) for r in records)
    print(Path(args.out) / "manifest.jsonl")
    print(f"items={len(records)} classes={corpus.num_classes} split={args.split}")
    print("classes-in-mixture histogram: " + ", ".join(f"{k}:{hist[k]}" for k in sorted(hist)))


def cmd_train(args):
    train_cfg, model_cfg = read_config_file(args.config) if args.config else ({}, {})
    for f in fields(TrainConfig):
        value = getattr(args, f.name)
        if value is not None:
            train_cfg[f.name] = value
    config = TrainConfig.from_dict(train_cfg)
    num_classes = manifest_num_classes(args.data)
    if args.model == "pit":
        if args.pit_outputs:
            model_cfg["output_channels"] = args.pit_outputs
        preset = {"full": PitConfig, "toy": PitConfig.toy, "miniature": PitConfig.miniature}[args.preset]
        k = model_cfg.pop("output_channels", 3)
        model_config = preset(k, **model_cfg) if args.preset != "full" else PitConfig(k, **model_cfg)
    else:
        model_cfg.setdefault("num_classes", num_classes)
        n = model_cfg.pop("num_classes")
        preset = {"full": SelectorConfig, "toy": SelectorConfig.toy, "miniature": SelectorConfig.miniature}[args.preset]
        model_config = preset(n, **model_cfg)
    result = fit(args.data, args.model, config, model_config, args.out, dev_manifest=args.dev, resume=args.resume)
    print(result.checkpoint)
    if result.losses:
        print(f"steps={len(result.losses)} final_loss_db={result.losses[-1]:.3f}")


def _load_input(path, model_rate):
    y, rate = read_wav(path)
    if rate != model_rate:
        log.warning("input sample rate %d Hz differs from model rate %d Hz; resampling", rate, model_rate)
        y_model = resample(y, rate, model_rate)
    else:
        y_model = y
    return y, rate, y_model


def _back_to_input(x, model_rate, rate, n):
    if rate != model_rate:
        x = resample(x, model_rate, rate)
    out = np.zeros(n)
    out[: min(n, x.shape[0])] = x[:n]
    return out


def _selection(args, expected_kind):
    ckpt = load_checkpoint(args.checkpoint, expected_kind=expected_kind)
    model_rate = int(ckpt.extra.get("sample_rate", 8000))
    names = Path(args.names).read_text().splitlines() if args.names else None
    classes = _parse_classes(args.classes, ckpt.model.config.num_classes, names)
    o = class_vector(classes, ckpt.model.config.num_classes)
    y, rate, y_model = _load_input(args.input, model_rate)
    est = _back_to_input(forward(y_model, o, ckpt.model), model_rate, rate, y.shape[0])
    return y, rate, est


def cmd_select(args):
    _, rate, est = _selection(args, None)
    write_wav(args.out, est, rate)
    print(args.out)


def cmd_remove(args):
    if args.scheme == "indirect":
        y, rate, est = _selection(args, None)
        out = y - est
    else:
        _, rate, out = _selection(args, "removal-direct")
    write_wav(args.out, out, rate)
    print(args.out)


def cmd_evaluate(args):
    reports = []
    for i in args.num_selected:
        reports.append(eval_mixture_baseline(args.data, i))
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        for i in args.num_selected:
            if ckpt.kind == "pit":
                reports.append(eval_pit_oracle(args.data, ckpt.model, i))
            elif ckpt.kind == "removal-direct":
                reports.append(eval_removal(args.data, ckpt.model, i, scheme="direct"))
            elif args.removal:
                reports.append(eval_removal(args.data, ckpt.model, i, scheme="indirect"))
            else:
                for mode in args.mode:
                    reports.append(eval_selection(args.data, ckpt.model, i, mode))
    baselines = [r for r in reports if r.method == "mixture"]
    others = [r for r in reports if r.method != "mixture"]
    text = "Mixture SI-SDR [dB]\n\n" + format_table(baselines, value="mean_mixture_si_sdr_db")
    if others:
        text += "\nSDR improvement [dB]\n\n" + format_table(others)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tables.md").write_text(text)
        for r in reports:
            name = f"{r.method}_I{r.num_selected}".replace(" ", "_").replace("+", "").replace("(", "").replace(")", "")
            r.to_csv(out / f"{name}.csv")


def build_parser():
    parser = _Parser(prog="sound-selector", description="Class-conditioned sound selection and removal.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="render a synthetic sound-event dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON scene config (SceneConfig fields)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--count", type=int, default=100, help="number of mixtures")
    p.add_argument("--policy", choices=["mix3", "mix3-5", "custom"], default="mix3",
                   help="distinct classes per mixture; custom reads class_policy from --config")
    p.add_argument("--num-classes", type=int, default=5, help="synthetic class bank size")
    p.add_argument("--corpus-seed", type=int, default=0, help="seed of the synthetic clip corpus")
    p.add_argument("--split", default="train", help="corpus split to draw clips from")
    p.add_argument("--duration-s", type=float, help="scene duration override")
    p.add_argument("--num-events", type=int, help="events per scene override")
    p.add_argument("--num-targets", type=int, help="pre-defined target classes per scene override")
    p.add_argument("--foreground-dir", help="real corpus: <dir>/<split>/<class>/*.wav")
    p.add_argument("--background-dir", help="real corpus backgrounds: <dir>/<split>/*.wav")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a selector, PIT or direct-removal model")
    p.add_argument("--model", choices=["selector", "pit", "removal-direct"], default="selector", help="model kind")
    p.add_argument("--data", required=True, help="training manifest (file or dataset directory)")
    p.add_argument("--dev", help="dev manifest for best-checkpoint selection")
    p.add_argument("--config", help="JSON or key=value config; model.<field> keys set architecture")
    p.add_argument("--out", required=True, help="output directory for checkpoints and log.csv")
    p.add_argument("--preset", choices=["full", "toy", "miniature"], default="full", help="architecture size")
    p.add_argument("--pit-outputs", type=int, help="PIT output channels K")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.npz")
    for f in fields(TrainConfig):
        kw = {"default": None, "help": f"TrainConfig.{f.name}"}
        if f.name == "target_count_distribution":
            kw.update(type=float, nargs="+")
        else:
            kw["type"] = {"int": int, "float": float, "str": str}.get(type(f.default).__name__, str)
        p.add_argument(_flag(f.name), **kw)
    p.set_defaults(func=cmd_train)

    for name, func in (("select", cmd_select), ("remove", cmd_remove)):
        p = sub.add_parser(name, help=f"{name} the sounds of the given classes in a WAV file")
        p.add_argument("--checkpoint", required=True, help="model checkpoint (.npz)")
        p.add_argument("--in", dest="input", required=True, help="input mixture WAV")
        p.add_argument("--classes", required=True, help="comma-separated class indices (or names with --names)")
        p.add_argument("--names", help="class names file, one per line")
        p.add_argument("--out", required=True, help="output WAV")
        if name == "remove":
            p.add_argument("--scheme", choices=["indirect", "direct"], default="indirect",
                           help="indirect: mixture minus selector output; direct: removal-trained model")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="SDR-improvement tables on a dataset")
    p.add_argument("--data", required=True, help="evaluation manifest")
    p.add_argument("--checkpoint", help="model checkpoint; omit for mixture baselines only")
    p.add_argument("--num-selected", type=int, nargs="+", default=[1], help="I values to evaluate")
    p.add_argument("--mode", nargs="+", choices=["simultaneous", "iterative"], default=["simultaneous"],
                   help="selector extraction schemes")
    p.add_argument("--removal", action="store_true", help="evaluate indirect removal with a selector")
    p.add_argument("--out", help="directory for CSV reports and tables.md")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sound-selector: error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteLossError as exc:
        print(f"sound-selector: training aborted: {exc}", file=sys.stderr)
        return 2
    except (InvalidArgumentError, ConfigurationError, CheckpointError, OSError) as exc:
        print(f"sound-selector: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
