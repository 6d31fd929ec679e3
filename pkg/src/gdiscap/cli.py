"""Command-line entry point: ``gdiscap <subcommand> [flags]``.

Subcommands: synth, group, train, caption, eval, gma-inspect.  Any subcommand
accepts ``--config file.json`` whose keys mirror the long flag names
(dashes or underscores); flags given on the command line win.

Exit codes: 0 success, 1 usage error, 2 data or contract error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import (DatasetError, Vocabulary, read_records, synth_generate, tokenize,
                     write_dataset)
from .gma import GmaConfigError
from .grouping import GroupingError, build_groups, read_groups, target_group_index, write_groups
from .losses import DISLOSS_MODES
from .metrics import evaluate, format_report
from .system import CheckpointError, load_checkpoint, prepare_group
from .tensor import TrainingError
from .trainer import TrainConfig, train

log = logging.getLogger("gdiscap")

USAGE_EXIT = 1
DATA_EXIT = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _stage_epochs(text: str) -> tuple[int, int]:
    try:
        xe, rl = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected XE:RL epoch counts, got {text!r}") from None
    if xe < 0 or rl < 0:
        raise argparse.ArgumentTypeError("epoch counts must be non-negative")
    return xe, rl


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flag values (flags on the command line win)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--verbose", "-v", action="store_true", help="debug logging")


def _dataset(p, required=True):
    p.add_argument("--dataset", "--in", dest="dataset", required=required, help="dataset JSON Lines file")


def build_parser() -> _Parser:
    parser = _Parser(prog="gdiscap", description="Group-based distinctive image captioning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--images", type=int, default=120, help="number of images (default 120)")
    p.add_argument("--regions", type=int, default=5, help="regions per image (default 5)")
    p.add_argument("--dim", type=int, default=16, help="region feature width (default 16)")
    p.add_argument("--concepts", type=int, default=36, help="concept vocabulary size (default 36)")
    p.add_argument("--noise", type=float, default=0.15, help="feature noise scale (default 0.15)")
    p.add_argument("--test-fraction", type=float, default=0.0, help="share of themes held out as split 'test'")
    p.add_argument("--sidecar", action="store_true", help="store features in a binary .gdf sidecar")
    p.add_argument("--out", required=True, help="output dataset path")

    p = sub.add_parser("group", help="build similar-image groups and write them as JSON Lines")
    _common(p)
    _dataset(p)
    p.add_argument("--k", type=int, default=5, help="similar images per group (default 5)")
    p.add_argument("--epoch", type=int, default=0, help="epoch index stored with each group")
    p.add_argument("--split", help="only group records of this split")
    p.add_argument("--out", help="output path (default stdout)")

    p = sub.add_parser("train", help="train a captioner and write a checkpoint")
    _common(p)
    _dataset(p)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--k", type=int, default=5, help="similar images per group (default 5)")
    p.add_argument("--stage-epochs", type=_stage_epochs, default=(15, 5), metavar="XE:RL",
                   help="epochs of cross-entropy then self-critical training (default 15:5)")
    p.add_argument("--disloss-mode", choices=DISLOSS_MODES, default="literal",
                   help="distinctive-word loss variant (default literal)")
    p.add_argument("--lr", type=float, default=3e-3, help="Adam learning rate (default 3e-3)")
    p.add_argument("--rl-lr", type=float, default=3e-5, help="learning rate of the RL stage (default 3e-5)")
    p.add_argument("--batch-groups", type=int, default=1, help="groups per optimizer step (default 1)")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every N epochs")
    p.add_argument("--min-freq", type=int, default=2, help="vocabulary min frequency (default 2)")
    p.add_argument("--log", dest="log_path", help="per-step training log (JSON Lines)")
    p.add_argument("--no-gma", action="store_true", help="disable group attention")
    p.add_argument("--no-disloss", action="store_true", help="disable the distinctive-word loss")
    p.add_argument("--no-memcls", action="store_true", help="disable the memory classification loss")
    p.add_argument("--model", type=json.loads, default={},
                   help='model size overrides as JSON, e.g. \'{"d_model": 64}\'')

    p = sub.add_parser("caption", help="caption every group target with a trained checkpoint")
    _common(p)
    _dataset(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--groups", help="group file (default: build groups from the dataset)")
    p.add_argument("--k", type=int, default=5, help="group size when building groups (default 5)")
    p.add_argument("--split", help="only caption records of this split when building groups")
    p.add_argument("--beam", type=int, default=1, help="beam width, 1 = greedy (default 1)")
    p.add_argument("--out", help="output path (default stdout)")

    p = sub.add_parser("eval", help="score a caption file")
    _common(p)
    _dataset(p)
    p.add_argument("--captions", required=True, help="caption JSON Lines from `caption`")
    p.add_argument("--groups", required=True, help="group file the captions were made with")
    p.add_argument("--out", help="write the JSON report here (default stdout)")

    p = sub.add_parser("gma-inspect", help="dump group attention details for one group")
    _common(p)
    _dataset(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--groups", required=True, help="group file")
    p.add_argument("--group-index", type=int, default=0, help="which group line (default 0)")
    p.add_argument("--out", help="output path (default stdout)")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _config_path(argv) -> str | None:
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return known.config


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    path = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    if path and command in COMMANDS:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        sub = _subparser(parser, command)
        known = {a.dest for a in sub._actions}
        defaults = {}
        for key, value in values.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest == "in":
                dest = "dataset"
            if dest not in known or dest in ("help", "config"):
                raise UsageError(f"{path}: unknown key {key!r} for {command}")
            if dest == "stage_epochs" and isinstance(value, str):
                try:
                    value = _stage_epochs(value)
                except argparse.ArgumentTypeError as exc:
                    raise UsageError(f"{path}: {exc}") from None
            defaults[dest] = value
        sub.set_defaults(**defaults)
        # a required flag may be supplied by the file instead
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


def _emit(lines, out) -> None:
    text = "".join(line + "\n" for line in lines)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _groups_for(args, records):
    if getattr(args, "groups", None):
        return read_groups(args.groups)
    pool = records if not args.split else [r for r in records if r.meta.get("split", "train") == args.split]
    return build_groups(pool, args.k, args.seed)


def cmd_synth(args) -> None:
    records = synth_generate(args.seed, args.images, args.regions, args.dim, args.concepts,
                             noise=args.noise, test_fraction=args.test_fraction)
    write_dataset(records, args.out, sidecar=args.sidecar)
    log.info("wrote %d images to %s", len(records), args.out)


def cmd_group(args) -> None:
    records = read_records(args.dataset)
    if args.split:
        records = [r for r in records if r.meta.get("split", "train") == args.split]
    groups = build_groups(records, args.k, args.seed, args.epoch)
    if args.out:
        write_groups(groups, args.out)
    else:
        _emit([json.dumps({"epoch": g.epoch, "members": list(g.member_ids), "leftover": g.leftover})
               for g in groups], None)
    log.info("%d groups (%d leftover)", len(groups), sum(g.leftover for g in groups))


def cmd_train(args) -> None:
    xe, rl = args.stage_epochs
    config = TrainConfig(
        dataset=args.dataset, checkpoint=args.checkpoint, log_path=args.log_path,
        xe_epochs=xe, rl_epochs=rl, lr=args.lr, rl_lr=args.rl_lr, batch_groups=args.batch_groups, k=args.k,
        seed=args.seed, disloss_mode=args.disloss_mode, use_gma=not args.no_gma,
        use_disloss=not args.no_disloss, use_memcls=not args.no_memcls,
        checkpoint_every=args.checkpoint_every, min_freq=args.min_freq, model=dict(args.model),
    )
    result = train(config)
    log.info("trained %d steps; checkpoint %s", len(result.log), args.checkpoint)


def _captions(system, vocab: Vocabulary, records, groups, beam: int):
    by_id = {r.image_id: r for r in records}
    missing = sorted({m for g in groups for m in g.member_ids} - by_id.keys())
    if missing:
        raise DatasetError(f"group members not in dataset: {missing[:5]}")
    out = {}
    for image_id, (group, pos) in target_group_index(groups).items():
        out.setdefault(group, []).append((pos, image_id))
    rows = []
    for group, roles in out.items():
        data = prepare_group(group, by_id, vocab)
        positions = [p for p, _ in roles]
        for (pos, image_id), cap in zip(roles, system.caption_group(data.features, positions, beam=beam)):
            words = vocab.decode(cap.tokens)
            rows.append((image_id, {"image_id": image_id, "caption": " ".join(words),
                                    "tokens": words, "empty": cap.empty}))
    return [row for _, row in sorted(rows, key=lambda x: x[0])]


def cmd_caption(args) -> None:
    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    system, vocab, _ = load_checkpoint(args.checkpoint)
    records = read_records(args.dataset)
    groups = _groups_for(args, records)
    rows = _captions(system, vocab, records, groups, args.beam)
    _emit([json.dumps(r) for r in rows], args.out)
    log.info("captioned %d images (%d empty)", len(rows), sum(r["empty"] for r in rows))


def _read_captions(path) -> dict:
    captions = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                tokens = obj.get("tokens")
                if tokens is None:
                    tokens = tokenize(obj["caption"])
                captions[str(obj["image_id"])] = [str(t) for t in tokens]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed caption line") from exc
    return captions


def cmd_eval(args) -> None:
    records = read_records(args.dataset)
    groups = read_groups(args.groups)
    captions = _read_captions(args.captions)
    unknown = sorted(set(captions) - {r.image_id for r in records})
    if unknown:
        raise DatasetError(f"captions for images not in the dataset: {unknown[:5]}")
    report = evaluate(captions, records, groups)
    _emit([json.dumps(report, sort_keys=True)], args.out)
    print(format_report(report), file=sys.stderr)


def cmd_gma_inspect(args) -> None:
    system, vocab, _ = load_checkpoint(args.checkpoint)
    records = read_records(args.dataset)
    groups = read_groups(args.groups)
    if not 0 <= args.group_index < len(groups):
        raise GroupingError(f"group index {args.group_index} out of range (0..{len(groups) - 1})")
    group = groups[args.group_index]
    by_id = {r.image_id: r for r in records}
    data = prepare_group(group, by_id, vocab)
    targets = []
    for pos in data.targets:
        res = system.inspect(data.features, pos)
        targets.append({"image_id": data.image_ids[pos], **res.to_json()})
    doc = {"members": list(group.member_ids), "omega": float(system.gma.omega.data),
           "bias": float(system.gma.bias.data), "targets": targets}
    _emit([json.dumps(doc)], args.out)


COMMANDS = {
    "synth": cmd_synth,
    "group": cmd_group,
    "train": cmd_train,
    "caption": cmd_caption,
    "eval": cmd_eval,
    "gma-inspect": cmd_gma_inspect,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USAGE_EXIT
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    resolved = {k: v for k, v in sorted(vars(args).items())}
    log.info("resolved config: %s", json.dumps(resolved, default=str, sort_keys=True))
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USAGE_EXIT
    except (DatasetError, GroupingError, CheckpointError, GmaConfigError, TrainingError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
