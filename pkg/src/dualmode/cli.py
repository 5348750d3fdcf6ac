"""``dualmode`` command line: encode, train, stream-sim, prune, cost, soup.

Every command writes ``manifest.json`` into ``--out`` next to its outputs.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, model_soup, save_checkpoint
from .config import dataclass_from_mapping, read_config
from .cost import (
    ArchSpec,
    cost_report,
    encoder_flops,
    kv_footprint,
    lm_prefill_flops,
    max_batch,
    tera,
    token_count,
)
from .encoder import EncoderConfig, base_encode, encode
from .errors import DualModeError
from .lm import LMConfig
from .modes import ModeSelector, assemble, visual_token_total
from .pruning import compute_group_scores, export_attention_map, prune_top_m, write_attention_maps
from .streaming import (
    STREAM_PRESETS,
    CacheState,
    detach_vs_reprefill_compare,
    plan_budget,
    query_view,
    streaming_token_total,
)
from .synthetic import make_video
from .training import (
    TrainConfig,
    build_model,
    configure_stage,
    count_changed,
    make_toy_task,
    model_from_checkpoint,
    stage1_step,
    stage2_step,
)


@dataclasses.dataclass(frozen=True)
class CostConfig:
    frames: int = 128
    vit_tokens_per_frame: int = 576
    llm_tokens_per_frame: int = 144
    standby_tokens_per_frame: int = 8
    bytes_per_value: int = 2
    memory_bytes: int = 64 * 2 ** 30


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _sections(path: str | None) -> dict:
    return read_config(path) if path else {}


def _load(sections: dict, name: str, cls):
    return dataclass_from_mapping(cls, sections.get(name, {}))


def _system(args):
    sec = _sections(args.config)
    enc = _load(sec, "encoder", EncoderConfig)
    if getattr(args, "n_llm", None) is not None:
        enc = dataclasses.replace(enc, n_vit=4 * args.n_llm)
    lm = _load(sec, "lm", LMConfig)
    if lm.hidden != enc.llm_dim:
        lm = dataclasses.replace(lm, hidden=enc.llm_dim)
    return enc, lm, _load(sec, "train", TrainConfig)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, args, command: str) -> None:
    argv = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    manifest = {
        "command": command,
        "config_paths": [args.config] if getattr(args, "config", None) else [],
        "seed": getattr(args, "seed", None),
        "version": f"dualmode-{__version__}",
        "out_dir": str(args.out),
        "args": argv,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_encode(args) -> int:
    enc, lm, _ = _system(args)
    mode = ModeSelector.parse(args.mode)
    out = _out(args)
    model = build_model(enc, lm, args.seed)
    pixels, ts = make_video(args.seed, args.frames, enc.o, enc.pixel_dim, fps=args.fps)
    P = model.params.bind()
    frames = encode(pixels, P, enc, timestamps=ts)
    base = base_encode(pixels, model.params, enc, timestamps=ts)
    diff = max((float(np.max(np.abs(f.z.data - b.z.data))) for f, b in zip(frames, base)), default=0.0)
    visual = 0
    if frames:
        inp = assemble(mode, frames)
        visual = inp.n_visual
        with open(out / "tokens.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["segment", "frame", "row"] + [f"c{j}" for j in range(enc.llm_dim)])
            for seg in inp.segments:
                for r in range(seg.length):
                    w.writerow([seg.kind, seg.frame_index, r] + [repr(float(x)) for x in inp.visual.data[seg.start + r]])
    report = {
        "mode": mode.value,
        "frames": args.frames,
        "n_vit": enc.n_vit,
        "n_llm": enc.n_llm,
        "o_s": enc.o_s,
        "visual_tokens": visual,
        "closed_form_tokens": visual_token_total(mode, args.frames, enc.n_llm, enc.o_s),
        "standby_shape": [enc.n_llm, enc.llm_dim],
        "original_shape": [enc.o_s, enc.llm_dim],
        "focus_invariance_max_abs_diff": diff,
    }
    _write_json(out / "report.json", report)
    write_manifest(out, args, "encode")
    print(f"mode: {mode.value}")
    print(f"visual tokens: {visual} ({args.frames} frames x {visual // args.frames if args.frames else 0})")
    print(f"focus path vs base encoder max abs diff: {diff!r}")
    return 0


def cmd_train(args) -> int:
    enc, lm, tcfg = _system(args)
    steps = tcfg.steps if args.steps is None else args.steps
    lr = tcfg.lr if args.lr is None else args.lr
    if args.stage == 2:
        if not args.init:
            raise DualModeError("stage 2 needs a stage-1 checkpoint (--init PATH)")
        model = model_from_checkpoint(load_checkpoint(args.init))
        enc, lm = model.enc, model.lm
    else:
        model = build_model(enc, lm, args.seed)
    out = _out(args)
    batch = make_toy_task(enc, lm, args.seed, tcfg.videos, tcfg.frames, tcfg.fps)
    configure_stage(model.params, args.stage)
    before = model.params.snapshot()

    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if args.stage == 1:
            w.writerow(["step", "loss"])
            for step in range(steps):
                w.writerow([step, repr(stage1_step(model, batch, lr))])
        else:
            w.writerow(["step", "loss1", "loss2", "combined"])
            for step in range(steps):
                l1, l2, c = stage2_step(model, batch, lr)
                w.writerow([step, repr(l1), repr(l2), repr(c)])

    vit_frozen = {k: v for k, v in before.items() if model.params[k].group == "original" and k.startswith("vit.")}
    changed_vit = sum(1 for k, v in vit_frozen.items() if model.params[k].value.tobytes() != v.tobytes())
    changed = count_changed(before, model.params)
    save_checkpoint(out / "checkpoint.ckpt", model.checkpoint(stage=args.stage))
    audit = {"stage": args.stage, "steps": steps, "original_params_changed": changed,
             "original_vit_params_changed": changed_vit}
    _write_json(out / "audit.json", audit)
    write_manifest(out, args, "train")
    if args.stage == 1:
        print(f"original params changed: {changed}")
    else:
        print(f"original vit params changed: {changed_vit}")
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    return 0


def cmd_stream_sim(args) -> int:
    out = _out(args)
    o_s, n_llm = args.o_s, args.n_llm if args.n_llm is not None else 8
    plan = plan_budget(args.budget_total, args.budget_local, args.fps, n_llm, o_s)
    bank_budget = args.budget_total - args.budget_local
    state = CacheState(args.budget_local, bank_budget)
    for q in range(args.frames):
        state.ingest(q, n_llm, o_s)
    (out / "events.jsonl").write_text(state.event_log())
    view = query_view(state)
    summary = {
        "frames": args.frames,
        "local_frames": [f.frame_id for f in state.local],
        "bank_frames": [b.frame_id for b in state.bank],
        "dropped_frames": state.dropped_frames,
        "visual_tokens": view.visual_tokens,
        "labels": view.labels,
        "plan": dataclasses.asdict(plan),
        "presets": [
            {"standby_frames": s, "focus_frames": f, "n_llm": n,
             "total": streaming_token_total(s, f, n, args.focus_extra)} for s, f, n in STREAM_PRESETS
        ],
    }
    if args.compare:
        enc, lm, _ = _system(args)
        model = build_model(enc, lm, args.seed)
        px, ts = make_video(args.seed, args.compare, enc.o, enc.pixel_dim, fps=args.fps)
        frames = encode(px, model.params.bind(), enc, timestamps=ts)
        per_frame = enc.n_llm + enc.o_s
        rep = detach_vs_reprefill_compare([f.l for f in frames], [f.z for f in frames], model.params.bind(), lm,
                                          2 * per_frame, 4 * enc.n_llm, [0, 1])
        summary["compare"] = {"frames": args.compare, "retained_equal": rep.retained_equal,
                              "max_logit_divergence": rep.max_logit_divergence}
    _write_json(out / "summary.json", summary)
    with open(out / "plan.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "value"])
        for k, v in dataclasses.asdict(plan).items():
            w.writerow([k, repr(v)])
    write_manifest(out, args, "stream-sim")

    for name, text in plan.rows():
        print(f"{name}: {text}")
    print(f"events: {len(state.events)}; local {len(state.local)} frames, bank {len(state.bank)}, "
          f"dropped {state.dropped_frames}")
    for p in summary["presets"]:
        print(f"preset {p['standby_frames']}+{p['focus_frames']} frames x {p['n_llm']}: {p['total']} tokens")
    if "compare" in summary:
        c = summary["compare"]
        print(f"detach vs re-prefill: retained equal {c['retained_equal']}, "
              f"max logit divergence {c['max_logit_divergence']!r}")
    return 0


def cmd_prune(args) -> int:
    enc, lm, _ = _system(args)
    out = _out(args)
    model = build_model(enc, lm, args.seed)
    px, ts = make_video(args.seed, max(args.frames, 1), enc.o, enc.pixel_dim, fps=args.fps)
    frames = encode(px, model.params.bind(), enc, timestamps=ts, want_weights=True)
    rows = []
    for f in frames:
        scores = compute_group_scores(f.standby_attention, enc)
        kept = prune_top_m(scores, args.m_percent)
        rows.append({"frame": f.frame_index, "groups": len(scores), "retained_groups": kept,
                     "retained_tokens": 4 * len(kept), "scores": [s.score for s in scores]})
        maps = export_attention_map(f.standby_attention, enc, args.top_fraction)
        write_attention_maps(maps, out / f"attention_frame{f.frame_index:03d}", pgm=args.pgm)
    _write_json(out / "pruning.json", {"m_percent": args.m_percent, "frames": rows})
    write_manifest(out, args, "prune")
    for r in rows:
        print(f"frame {r['frame']}: kept {len(r['retained_groups'])}/{r['groups']} groups, "
              f"{r['retained_tokens']} tokens")
    return 0


def cmd_cost(args) -> int:
    sec = _sections(args.config)
    for name in ("vit_arch", "lm_arch"):
        if name not in sec:
            raise DualModeError(f"cost needs a [{name}] section in --config")
    vit = dataclass_from_mapping(ArchSpec, sec["vit_arch"])
    lm = dataclass_from_mapping(ArchSpec, sec["lm_arch"])
    cc = _load(sec, "cost", CostConfig)
    F = cc.frames if args.frames is None else args.frames
    out = _out(args)
    n_llm = cc.standby_tokens_per_frame if args.n_llm is None else args.n_llm

    lines = []
    enc1, enc2 = (encoder_flops(vit, f, cc.vit_tokens_per_frame) for f in (F, 2 * F))
    lines.append(f"encoder FLOPs: {F} frames {tera(enc1):.1f}T, {2 * F} frames {tera(enc2):.1f}T, "
                 f"ratio {enc2 / enc1 if enc1 else math.nan!r}")
    table = []
    for label, per in (("focus", cc.llm_tokens_per_frame), ("standby", n_llm)):
        for f in (F, 2 * F):
            p = lm_prefill_flops(lm, f * per)
            table.append({"mode": label, "frames": f, "tokens": f * per, "linear": p.linear,
                          "quadratic": p.quadratic, "total": p.total})
            lines.append(f"LM prefill {label} {f} frames x {per}: linear {tera(p.linear):.1f}T "
                         f"+ quadratic {tera(p.quadratic):.1f}T = {tera(p.total):.1f}T")
    r = table[1]["total"] / table[0]["total"] if table[0]["total"] else math.nan
    lines.append(f"LM prefill ratio focus {F}->{2 * F} frames: {r:.4f}")
    kv_focus = kv_footprint(lm, F * cc.llm_tokens_per_frame, cc.bytes_per_value)
    kv_standby = kv_footprint(lm, F * n_llm, cc.bytes_per_value)
    if kv_focus and kv_standby:
        lines.append(f"KV bytes/request: focus {kv_focus}, standby {kv_standby} "
                     f"(ratio {kv_standby / kv_focus:.4f}); max batch {max_batch(cc.memory_bytes, kv_focus)} vs "
                     f"{max_batch(cc.memory_bytes, kv_standby)}")
    tc = token_count(F, n_llm)
    lines.append(f"standby visual tokens: {tc.total} ({tc.label} of baseline)")
    rep = cost_report(vit, lm, F, cc.vit_tokens_per_frame, F * cc.llm_tokens_per_frame, F * n_llm,
                      F * (n_llm + cc.llm_tokens_per_frame), cc.memory_bytes, cc.bytes_per_value)
    (out / "cost_report.json").write_text(rep.to_json() + "\n")
    (out / "cost_report.csv").write_text(rep.to_csv())
    with open(out / "prefill.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    write_manifest(out, args, "cost")
    print("\n".join(lines))
    return 0


def cmd_soup(args) -> int:
    if not 0 <= args.weight <= 1:
        raise UsageError(f"--weight must lie in [0, 1], got {args.weight}")
    out = _out(args)
    soup = model_soup(load_checkpoint(args.a), load_checkpoint(args.b), args.weight)
    save_checkpoint(out / "soup.ckpt", soup)
    write_manifest(out, args, "soup")
    print(f"soup of {len(soup.params)} parameters written to {out / 'soup.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", metavar="DIR", default="out")

    p = argparse.ArgumentParser(prog="dualmode", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dualmode {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("encode", parents=[common], help="encode synthetic frames and report token counts")
    e.add_argument("--mode", choices=["standby", "focus"], default="standby")
    e.add_argument("--frames", type=int, default=8)
    e.add_argument("--n-llm", type=int, dest="n_llm")
    e.add_argument("--fps", type=float, default=2.0)
    e.set_defaults(func=cmd_encode)

    t = sub.add_parser("train", parents=[common], help="run stage 1 or stage 2 on the toy task")
    t.add_argument("--stage", type=int, choices=[1, 2], required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--init", metavar="PATH", help="stage-1 checkpoint to continue from (stage 2)")
    t.add_argument("--n-llm", type=int, dest="n_llm")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("stream-sim", parents=[common], help="simulate the streaming cache and plan budgets")
    s.add_argument("--frames", type=int, default=0)
    s.add_argument("--budget-total", type=int, default=32768, dest="budget_total")
    s.add_argument("--budget-local", type=int, default=4096, dest="budget_local")
    s.add_argument("--fps", type=float, default=2.0)
    s.add_argument("--n-llm", type=int, dest="n_llm")
    s.add_argument("--o-s", type=int, default=324, dest="o_s", help="original tokens per frame on the LM side")
    s.add_argument("--focus-extra", type=int, default=144, dest="focus_extra")
    s.add_argument("--compare", type=int, default=0, metavar="FRAMES",
                   help="also compare detach vs re-prefill on a toy model over this many frames")
    s.set_defaults(func=cmd_stream_sim)

    r = sub.add_parser("prune", parents=[common], help="score and prune original tokens")
    r.add_argument("--m-percent", type=float, default=50.0, dest="m_percent")
    r.add_argument("--frames", type=int, default=1)
    r.add_argument("--fps", type=float, default=2.0)
    r.add_argument("--n-llm", type=int, dest="n_llm")
    r.add_argument("--top-fraction", type=float, default=0.1, dest="top_fraction")
    r.add_argument("--pgm", action="store_true", help="also write greyscale .pgm maps")
    r.set_defaults(func=cmd_prune)

    c = sub.add_parser("cost", parents=[common], help="analytic FLOPs / KV accounting")
    c.add_argument("--frames", type=int)
    c.add_argument("--n-llm", type=int, dest="n_llm")
    c.set_defaults(func=cmd_cost)

    o = sub.add_parser("soup", parents=[common], help="average two checkpoints")
    o.add_argument("a", metavar="CKPT_A")
    o.add_argument("b", metavar="CKPT_B")
    o.add_argument("--weight", type=float, default=0.5)
    o.set_defaults(func=cmd_soup)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        for name in ("frames", "steps", "n_llm", "compare"):
            v = getattr(args, name, None)
            if v is not None and v < 0:
                raise UsageError(f"--{name.replace('_', '-')} must be non-negative")
        if getattr(args, "m_percent", None) is not None and not 0 < args.m_percent <= 100:
            raise UsageError("--m-percent must lie in (0, 100]")
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (DualModeError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
