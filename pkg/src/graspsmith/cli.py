"""Command-line surface tying the pipeline together.

Exit codes: 0 success, 1 usage error, 2 validation failure (bad inputs or
files), 3 acceptance-gate failure (grad-check threshold, invalid-rate
ceiling). Outputs are first written with a ``.partial`` suffix and
renamed only on success; every run persists its effective configuration
next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import codec as codec_mod
from .config import RunConfig, load_config
from .errors import ConfigError, GraspsmithError
from .evaluation import EvalReport, Evaluator, format_sweep_table
from .geometry import load_xyz, save_xyz, PointCloud
from .hand import default_hand, forward_kinematics, link_surface_points
from .pipeline import (fit_normalization, prepare_training_samples,
                       save_tokenized, tokenize_samples)
from .reasoning import (ModelConfig, build_attention_mask, generate,
                        gradient_check, load_checkpoint, render_mask,
                        save_checkpoint, save_loss_curve, train)
from .reasoning.gradcheck import format_report
from .synthetic import build_dataset, load_split

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_GATE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _finalize(partial_path: str, final_path: str) -> None:
    os.replace(partial_path, final_path)


def _config_from_args(args) -> RunConfig:
    return load_config(getattr(args, "config", None) or None,
                       getattr(args, "set", None) or [])


def _load_norm(path):
    return codec_mod.load_normalization(path)


def _meta_prompts(cfg: RunConfig):
    path = cfg.codec.meta_prompt_file or None
    return codec_mod.load_meta_prompts(path)


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    if args.seed is not None:
        cfg.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    manifest = build_dataset(args.out, cfg.dataset_config(), seed=cfg.seed,
                             verbose=not args.quiet)
    cfg.save(os.path.join(args.out, "config.txt"))
    counts = {k: v["count"] for k, v in manifest["splits"].items()}
    print(f"dataset written to {args.out}: {counts}")
    return EXIT_OK


def cmd_fit_norm(args) -> int:
    cfg = _config_from_args(args)
    split_dir = os.path.dirname(os.path.abspath(args.data))
    split = os.path.splitext(os.path.basename(args.data))[0]
    samples = load_split(split_dir, split)
    norm, bounds = fit_normalization(samples, cfg.codec.bounds_margin)
    partial = args.out + ".partial"
    codec_mod.save_normalization(norm, bounds, partial)
    _finalize(partial, args.out)
    cfg.save(args.out + ".config.txt")
    print(f"normalizer + bounds over {len(samples)} samples -> {args.out}")
    return EXIT_OK


def cmd_tokenize(args) -> int:
    cfg = _config_from_args(args)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.p_drop is not None:
        cfg.codec.p_drop = args.p_drop
    split_dir = os.path.dirname(os.path.abspath(args.data))
    split = os.path.splitext(os.path.basename(args.data))[0]
    hand = default_hand()
    samples = load_split(split_dir, split, hand)
    norm, bounds = _load_norm(args.norm)
    meta_prompts = _meta_prompts(cfg)
    vocab = codec_mod.default_vocabulary(
        hand, meta_prompt_path=cfg.codec.meta_prompt_file or None,
        n_action_bins=cfg.codec.n_action_bins,
        n_pos_bins=cfg.codec.n_pos_bins)
    entries = tokenize_samples(
        samples, norm, bounds, vocab, p_drop=cfg.codec.p_drop,
        seed=cfg.seed, dropout_granularity=cfg.codec.dropout_granularity,
        n_visual_tokens=cfg.model.n_visual_tokens,
        meta_prompts=meta_prompts, ablate_contacts=args.ablate_contacts)
    partial = args.out + ".partial"
    save_tokenized(partial, entries, vocab, split_dir, meta={
        "p_drop": cfg.codec.p_drop, "seed": cfg.seed,
        "ablate_contacts": bool(args.ablate_contacts),
        "norm_file": os.path.abspath(args.norm),
    })
    _finalize(partial, args.out)
    cfg.save(args.out + ".config.txt")
    print(f"{len(entries)} sequences -> {args.out} "
          f"(vocab {vocab.size} tokens)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if args.seed is not None:
        cfg.seed = args.seed
    model_probe = cfg.model_config(vocab_size=1)  # placeholder for sizes
    header, samples, vocab = prepare_training_samples(
        args.data, model_probe)
    mcfg = cfg.model_config(vocab_size=vocab.size)
    print(f"training on {len(samples)} sequences, vocab {vocab.size}, "
          f"{mcfg.total_steps} steps")
    result = train(samples, mcfg, pad_id=vocab.pad_id, seed=cfg.seed,
                   log_every=args.log_every)
    partial = args.out + ".partial.npz"
    save_checkpoint(partial, result.model, vocab, mcfg.total_steps)
    _finalize(partial, args.out)
    save_loss_curve(result.loss_curve, args.out + ".loss.csv")
    cfg.save(args.out + ".config.txt")
    print(f"final loss {result.final_loss:.4f} -> {args.out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _config_from_args(args)
    model, vocab, _ = load_checkpoint(args.ckpt)
    norm, bounds = _load_norm(args.norm)
    cloud = load_xyz(args.object)
    hand = default_hand()
    steering_prefix = None
    if args.steer:
        with open(args.steer) as fh:
            items = json.load(fh)
        from .geometry import ContactRecord, ContactSet

        records = [ContactRecord(it["link"], np.array(it["pos"]), 0.0)
                   for it in items]
        contact_set = ContactSet.from_records(records, hand)
        k = args.steer_links if args.steer_links is not None \
            else len(contact_set)
        if k > 0:
            steering_prefix = codec_mod.build_steering_prefix(
                contact_set, k, bounds, vocab)
    result = generate(
        model, vocab, cloud.points, args.instruction, norm.dim,
        steering_prefix=steering_prefix,
        mode="temperature" if args.temperature else "greedy",
        temperature=args.temperature or 1.0,
        constrain=args.constrain, seed=args.seed,
        meta_prompt_id=args.meta_prompt_id,
        meta_prompts=_meta_prompts(cfg))

    print("tokens:")
    print(" ".join(vocab.name(i) for i in result.assistant_ids))
    print(f"status: {result.status}")
    parse = codec_mod.validate_grammar(result.assistant_ids, vocab,
                                       norm.dim)
    if not parse.ok:
        print(f"grammar violations: {list(parse.violations)}")
        return EXIT_OK
    pose = codec_mod.decode_action(
        [vocab.action_bin_id(b) for b in parse.action_bins], norm, vocab)
    print("grasp vector:")
    print("  " + " ".join(f"{v:.5f}" for v in pose.as_vector()))
    print("contacts:")
    for link, pos in codec_mod.decode_parsed_contacts(parse, bounds,
                                                      vocab):
        if pos is None:
            print(f"  {link} (no position)")
        else:
            print(f"  {link} at ({pos[0]:.4f}, {pos[1]:.4f}, "
                  f"{pos[2]:.4f})")
    if args.dump_hand_points:
        poses = forward_kinematics(hand, pose)
        pts = link_surface_points(hand, poses,
                                  cfg.eval.samples_per_link)
        save_xyz(PointCloud(pts), args.dump_hand_points)
        print(f"hand surface points -> {args.dump_hand_points}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.constrain:
        cfg.eval.constrain = True
    model, vocab, _ = load_checkpoint(args.ckpt)
    norm, bounds = _load_norm(args.norm)
    hand = default_hand()
    split_dir = os.path.dirname(os.path.abspath(args.split))
    split = os.path.splitext(os.path.basename(args.split))[0]
    samples = load_split(split_dir, split, hand)
    if args.limit:
        samples = samples[:args.limit]
    evaluator = Evaluator(model, vocab, norm, bounds, hand,
                          cfg.eval_config(), _meta_prompts(cfg))
    if args.sweep:
        lo, _, hi = args.sweep.partition("..")
        k_values = list(range(int(lo), int(hi) + 1))
        table, skipped = evaluator.steering_sweep(samples, k_values,
                                                  seed=cfg.seed)
        print(format_sweep_table(table, skipped))
        if args.out:
            partial = args.out + ".partial"
            with open(partial, "w") as fh:
                fh.write(json.dumps({"sweep": table,
                                     "skipped": skipped}) + "\n")
            _finalize(partial, args.out)
            cfg.save(args.out + ".config.txt")
        return EXIT_OK
    report = evaluator.full_report(samples, seed=cfg.seed)
    print(report.to_table())
    if args.out:
        partial = args.out + ".partial"
        with open(partial, "w") as fh:
            fh.write(report.to_json_lines())
        _finalize(partial, args.out)
        with open(args.out + ".txt", "w") as fh:
            fh.write(report.to_table() + "\n")
        cfg.save(args.out + ".config.txt")
    if report.aggregates["invalid_rate"] > cfg.eval.invalid_rate_ceiling:
        print(f"invalid_rate {report.aggregates['invalid_rate']:.3f} "
              f"exceeds ceiling {cfg.eval.invalid_rate_ceiling}",
              file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def cmd_mask(args) -> int:
    lengths = [int(x) for x in args.layout.split(",")]
    if len(lengths) != 5:
        print("error: --layout needs 5 comma-separated lengths",
              file=sys.stderr)
        return EXIT_USAGE
    layout = codec_mod.SegmentLayout.from_lengths(*lengths)
    mask = build_attention_mask(layout)
    print("rows = queries, columns = keys; '#' = can attend")
    print("segments: text_pre | pc | text_post | contact | action")
    print(render_mask(mask))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    report = gradient_check(seed=args.seed)
    print(format_report(report))
    if report.max_relative_error >= 1e-4:
        print("FAIL: max relative error above 1e-4", file=sys.stderr)
        return EXIT_GATE
    print("OK: all parameter groups below 1e-4")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def make_parser() -> _Parser:
    parser = _Parser(prog="graspsmith",
                     description="contact-reasoned grasp generation "
                                 "pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-norm",
                       help="fit quantile normalizer + position bounds")
    common(p)
    p.add_argument("--data", required=True, help="training split .jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_norm)

    p = sub.add_parser("tokenize", help="serialize token sequences")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--norm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--p-drop", type=float, default=None)
    p.add_argument("--ablate-contacts", action="store_true",
                   help="empty every contact block (no-reasoning ablation)")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train", help="train the model")
    common(p)
    p.add_argument("--data", required=True, help="tokenized dataset")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--log-every", type=int, default=200)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode a grasp for one object")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--norm", required=True)
    p.add_argument("--object", required=True, help=".xyz point cloud")
    p.add_argument("--instruction", required=True)
    p.add_argument("--steer", help="JSON contact list for steering")
    p.add_argument("--steer-links", type=int, default=None)
    p.add_argument("--constrain", action="store_true")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--meta-prompt-id", type=int, default=0)
    p.add_argument("--dump-hand-points",
                   help="write generated hand surface samples (.xyz)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--norm", required=True)
    p.add_argument("--split", required=True, help="split .jsonl")
    p.add_argument("--out", default=None)
    p.add_argument("--sweep", default=None, metavar="LO..HI",
                   help="steering sweep over k = LO..HI")
    p.add_argument("--constrain", action="store_true")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask", help="print a hybrid attention mask")
    p.add_argument("--layout", required=True,
                   help="5 comma-separated segment lengths")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("grad-check",
                       help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraspsmithError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
