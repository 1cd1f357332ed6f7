"""Command-line surface for the packing pipeline.

Commands: generate (puzzle corpora), teach (GA teacher corpora), train
(score network), sample (reverse-SDE batches), enhance, eval (metric
tables), render (SVG), bench (method comparison).  Every artifact-producing
command writes a `<output>.manifest.json` sidecar recording the exact
configuration, seeds, inputs, and timings needed to re-run it.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .dataset import (
    GenerationFailed,
    GroundTruth,
    PuzzleSpec,
    arbitrary_boundary,
    feasibility,
    generate_puzzle,
    instance_from_dict,
    instance_to_dict,
    iou,
    iter_jsonl,
    strip_instance,
    write_jsonl,
)
from .diffusion import SampleConfig, SigmaSchedule, WeightStats, sample_rsde
from .enhancement import EnhanceConfig, enhance
from .geometry import Boundary, PackingInstance, Polygon, Strip, utilization
from .render import render_instance_svg, render_trajectory_frames
from .scoremodel import (
    ModelConfig,
    ScoreModel,
    TrainConfig,
    load_checkpoint,
    prepare_record,
    save_checkpoint,
    train,
)
from .teacher import PlacementImpossible, TeacherConfig, evolve, generate_corpus

DATA_ROOT_ENV = "SCOREPACK_DATA_ROOT"


class CliError(SystemExit):
    def __init__(self, message: str):
        print(f"error: {message}", file=sys.stderr)
        super().__init__(2)


def _resolve(path: str) -> str:
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


def _write_manifest(out_path: str, command: str, args: argparse.Namespace,
                    inputs: list[str], outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": {k: v for k, v in vars(args).items() if k != "func"},
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
        "git": _git_describe(),
        "wall_clock_s": round(time.time() - started, 3),
    }
    with open(out_path + ".manifest.json", "w") as fp:
        json.dump(manifest, fp, indent=2, sort_keys=True)


def _load_config_file(path: str, command: str) -> dict:
    try:
        import tomllib  # Python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fp:
        doc = tomllib.load(fp)
    return doc.get(command, {})


def _apply_config_defaults(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    if getattr(args, "config", None):
        overrides = _load_config_file(_resolve(args.config), args.command)
        for key, value in overrides.items():
            key = key.replace("-", "_")
            if not hasattr(args, key):
                raise CliError(f"unknown config key '{key}' for {args.command}")
            # flags given on the command line win over the config file
            if f"--{key.replace('_', '-')}" not in " ".join(sys.argv):
                setattr(args, key, value)
    return args


def _threads(args) -> int:
    n = getattr(args, "threads", None) or os.cpu_count() or 1
    return max(1, n)


def _map_ordered(fn, items, n_threads: int):
    """Parallel map that preserves input order (deterministic reduction)."""
    if n_threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, items))


# --- generate ----------------------------------------------------------------


def cmd_generate(args) -> int:
    started = time.time()
    if args.count < 1:
        raise CliError("--count must be >= 1")
    out = _resolve(args.out)

    def make_spec(k: int) -> PuzzleSpec:
        seed = args.seed + k
        if args.preset == "arbitrary10":
            boundary = arbitrary_boundary(args.side, rng_seed=seed * 7919)
            return PuzzleSpec(boundary=boundary, fragments=10, rng_seed=seed)
        fragments = {"square16": 16, "square2": 2}.get(args.preset, args.fragments)
        return PuzzleSpec.square(side=args.side, fragments=fragments, rng_seed=seed)

    def build(k: int) -> dict:
        try:
            _, gt = generate_puzzle(make_spec(k))
        except GenerationFailed as e:
            raise CliError(f"item {k}: {e}")
        inst = gt.instance
        if args.strip_height is not None:
            inst = strip_instance(gt, height=args.strip_height)
        return {
            "instance": instance_to_dict(inst, meta={"item": k, "seed": args.seed + k}),
            "utilization": 1.0,
            "provenance": {"generator": args.preset, "seed": args.seed + k},
        }

    records = _map_ordered(build, list(range(args.count)), _threads(args))
    write_jsonl(out, records)
    _write_manifest(out, "generate", args, [], [out], started)
    print(f"wrote {len(records)} puzzle instances to {out}")
    return 0


# --- teach --------------------------------------------------------------------


def _teacher_config(args) -> TeacherConfig:
    return TeacherConfig(
        n_angles=args.angles,
        population=args.population,
        generations=args.generations,
        restarts=args.restarts,
        mutation_rate=args.mutation_rate,
        rng_seed=args.seed,
        padding=args.padding,
    )


def cmd_teach(args) -> int:
    started = time.time()
    out = _resolve(args.out)
    cfg = _teacher_config(args)

    if args.instances:
        source = list(iter_jsonl(_resolve(args.instances)))
        if args.count and args.count < len(source):
            source = source[: args.count]

        def draw_k(rng: np.random.Generator):
            rec = source[draw_k.index]
            draw_k.index += 1
            inst = instance_from_dict(rec["instance"])
            if not isinstance(inst.container, Strip):
                inst = strip_instance(GroundTruth(instance=inst))
            return list(inst.polygons), inst.container

        draw_k.index = 0
        count = len(source)
    else:

        def draw_k(rng: np.random.Generator):
            spec = PuzzleSpec.square(
                side=args.side, fragments=args.fragments,
                rng_seed=int(rng.integers(2**31 - 1)),
            )
            _, gt = generate_puzzle(spec)
            si = strip_instance(gt, height=args.strip_height or args.side)
            return list(si.polygons), si.container

        count = args.count or 8

    records, stats, skipped = generate_corpus(
        draw_k, count, cfg, scramble_rotations=not args.no_scramble
    )
    write_jsonl(out, (r.to_dict() for r in records))
    stats_path = out + ".stats.json"
    with open(stats_path, "w") as fp:
        json.dump(
            {"u_min": stats.u_min, "u_avg": stats.u_avg, "u_max": stats.u_max,
             "count": len(records), "skipped": skipped},
            fp, indent=2,
        )
    _write_manifest(out, "teach", args, [args.instances or ""], [out, stats_path], started)
    for k in skipped:
        print(f"skipped draw {k}: placement impossible", file=sys.stderr)
    print(
        f"wrote {len(records)} teacher records to {out} "
        f"(U min|avg|max = {stats.u_min:.4f}|{stats.u_avg:.4f}|{stats.u_max:.4f})"
    )
    return 0


# --- train ---------------------------------------------------------------------


def _model_config(args) -> ModelConfig:
    if args.model_preset == "paper":
        return ModelConfig()
    return ModelConfig.toy()


def cmd_train(args) -> int:
    started = time.time()
    corpus_path = _resolve(args.corpus)
    out = _resolve(args.out)
    records = []
    utils = []
    for rec in iter_jsonl(corpus_path):
        inst = instance_from_dict(rec["instance"])
        u = float(rec.get("utilization", 1.0))
        records.append(prepare_record(inst, u))
        utils.append(u)
    if not records:
        raise CliError(f"no records in {corpus_path}")
    stats = WeightStats(u_min=min(utils), u_avg=sum(utils) / len(utils), u_max=max(utils))
    if args.weighting and stats.degenerate:
        raise CliError(
            "corpus has a single utilization value; sigmoid weighting is undefined"
        )
    model = ScoreModel(
        _model_config(args),
        SigmaSchedule(sigma_min=args.sigma_min, sigma_max=args.sigma_max),
        seed=args.seed,
    )
    tcfg = TrainConfig(
        steps=args.steps, batch_size=args.batch_size, lr=args.lr,
        weight_decay=args.weight_decay, seed=args.seed,
        use_weighting=args.weighting, log_every=args.log_every,
    )
    rng = np.random.default_rng(tcfg.seed)
    from .scoremodel import AdamW

    optimizer = AdamW(model.store, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    result = train(records, model, tcfg, stats if args.weighting else None,
                   optimizer=optimizer, rng=rng)
    save_checkpoint(out, model, optimizer, rng, step=tcfg.steps,
                    extra={"corpus": corpus_path})
    curve_path = out + ".loss.csv"
    with open(curve_path, "w") as fp:
        fp.write("step,loss\n")
        for s, l in result.loss_curve:
            fp.write(f"{s},{l}\n")
    _write_manifest(out, "train", args, [corpus_path], [out, curve_path], started)
    print(f"trained {args.steps} steps; final loss {result.final_loss:.6f}; checkpoint {out}")
    return 0


# --- sample / enhance ------------------------------------------------------------


def _sample_one(model: ScoreModel, inst: PackingInstance, args, seed: int):
    cfg = SampleConfig(
        steps=args.steps, t_start=args.t_start, t_end=args.t_end,
        batch=args.batch, rng_seed=seed,
    )
    fn = model.make_score_fn(inst.polygons, inst.container)
    return sample_rsde(
        fn, inst.polygons, inst.container, cfg, model.sched,
        keep_trajectory=args.trajectory is not None,
    )


def cmd_sample(args) -> int:
    started = time.time()
    model, _, _, _ = load_checkpoint(_resolve(args.checkpoint))
    inst_path = _resolve(args.instances)
    out = _resolve(args.out)
    rows = list(iter_jsonl(inst_path))
    if args.count:
        rows = rows[: args.count]
    all_out = []
    selected_out = []
    for k, rec in enumerate(rows):
        inst = instance_from_dict(rec["instance"])
        res = _sample_one(model, inst, args, seed=args.seed + k)
        for c, chain in enumerate(res.instances):
            all_out.append({
                "item": k, "chain": c,
                "instance": instance_to_dict(chain),
                "feasible": res.feasible[c],
                "utilization": res.utilizations[c],
                "selected": c == res.selected,
            })
        selected_out.append({
            "item": k,
            "instance": instance_to_dict(res.best_instance),
            "feasible": res.selected_feasible,
            "utilization": res.utilizations[res.selected],
        })
        if args.trajectory is not None and k == 0:
            traj_path = _resolve(args.trajectory)
            header = {"instance": instance_to_dict(inst), "times": res.times.tolist()}
            lines = [header] + [
                {"step": s, "t": float(res.times[s]),
                 "poses": res.trajectory[res.selected, s].tolist()}
                for s in range(res.trajectory.shape[1])
            ]
            write_jsonl(traj_path, lines)
    write_jsonl(out, all_out)
    sel_path = out + ".selected.jsonl"
    write_jsonl(sel_path, selected_out)
    _write_manifest(out, "sample", args, [args.checkpoint, inst_path], [out, sel_path], started)
    n_feas = sum(1 for r in selected_out if r["feasible"])
    print(f"sampled {len(rows)} instances x {args.batch} chains; "
          f"{n_feas}/{len(rows)} selected results feasible")
    return 0


def _enhance_config(args) -> EnhanceConfig:
    return EnhanceConfig(
        max_iters=args.max_iters,
        overlap_tol_rel=args.overlap_tol,
        gap_search_eps=args.gap_eps,
        step_damping=args.damping,
        repeats=args.repeats,
    )


def cmd_enhance(args) -> int:
    started = time.time()
    inst_path = _resolve(args.instances)
    out = _resolve(args.out)
    cfg = _enhance_config(args)
    rows = list(iter_jsonl(inst_path))

    def run(rec):
        inst = instance_from_dict(rec["instance"])
        result, report = enhance(inst, cfg)
        return {
            "instance": instance_to_dict(result),
            "report": report.to_dict(),
            "utilization": utilization(result),
        }

    out_rows = _map_ordered(run, rows, _threads(args))
    write_jsonl(out, out_rows)
    _write_manifest(out, "enhance", args, [inst_path], [out], started)
    n_feas = sum(1 for r in out_rows if r["report"]["feasible"])
    print(f"enhanced {len(out_rows)} instances; {n_feas} feasible")
    return 0


# --- eval / render / bench ----------------------------------------------------------


def _metric_row(instances: list[PackingInstance]) -> dict:
    utils = []
    overlaps = []
    ious = []
    feas = 0
    for inst in instances:
        utils.append(utilization(inst))
        from .collision import overlap_area

        overlaps.append(overlap_area(inst).pct_of_total_area)
        rep = feasibility(inst)
        feas += rep.feasible
        if isinstance(inst.container, Boundary):
            ious.append(iou(inst))
    return {
        "min": min(utils), "avg": sum(utils) / len(utils), "max": max(utils),
        "overlap_pct": sum(overlaps) / len(overlaps),
        "iou": (sum(ious) / len(ious)) if ious else None,
        "feasibility_pct": 100.0 * feas / len(instances),
    }


def cmd_eval(args) -> int:
    started = time.time()
    inst_path = _resolve(args.instances)
    instances = [instance_from_dict(r["instance"]) for r in iter_jsonl(inst_path)]
    if not instances:
        raise CliError(f"no instances in {inst_path}")
    row = _metric_row(instances)
    elapsed = time.time() - started
    print(f"instances:        {len(instances)}")
    print(f"utilization us:   {100*row['min']:.2f} | {100*row['avg']:.2f} | {100*row['max']:.2f}  (Min|Avg|Max %)")
    print(f"overlap:          {row['overlap_pct']:.4f} % of total polygon area")
    if row["iou"] is not None:
        print(f"iou:              {row['iou']:.4f}")
    print(f"feasibility rate: {row['feasibility_pct']:.1f} %")
    print(f"mean wall time:   {elapsed / len(instances):.4f} s/instance")
    if args.out:
        out = _resolve(args.out)
        with open(out, "w") as fp:
            json.dump(row, fp, indent=2, sort_keys=True)
        _write_manifest(out, "eval", args, [inst_path], [out], started)
    return 0


def cmd_render(args) -> int:
    started = time.time()
    out = _resolve(args.out)
    if args.trajectory:
        rows = list(iter_jsonl(_resolve(args.trajectory)))
        header, steps = rows[0], rows[1:]
        inst = instance_from_dict(header["instance"])
        pattern = out if "{step}" in out else out.replace(".svg", ".{step}.svg")
        render_trajectory_frames(
            inst, [np.asarray(r["poses"]) for r in steps], pattern
        )
        outputs = [pattern.format(step=k) for k in range(len(steps))]
        print(f"wrote {len(steps)} frames to {pattern}")
    else:
        rows = list(iter_jsonl(_resolve(args.instances)))
        if not (0 <= args.index < len(rows)):
            raise CliError(f"--index {args.index} out of range ({len(rows)} instances)")
        inst = instance_from_dict(rows[args.index]["instance"])
        render_instance_svg(inst, out)
        outputs = [out]
        print(f"wrote {out}")
    _write_manifest(out, "render", args, [args.instances or args.trajectory], outputs, started)
    return 0


def cmd_bench(args) -> int:
    started = time.time()
    out = _resolve(args.out)
    rows: list[dict] = []

    def suite_instances():
        for k in range(args.count):
            if args.suite == "micro4":
                sq = [
                    Polygon([(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)])
                    for _ in range(4)
                ]
                yield k, sq, Strip(2.0)
            else:
                spec = PuzzleSpec.square(
                    side=args.side, fragments=args.fragments, rng_seed=args.seed + k
                )
                _, gt = generate_puzzle(spec)
                si = strip_instance(gt, height=args.strip_height or args.side)
                yield k, list(si.polygons), si.container

    items = list(suite_instances())

    # teacher method
    t_utils, t_times = [], []
    cfg = _teacher_config(args)
    for k, polys, strip in items:
        t0 = time.time()
        rec = evolve(polys, strip, cfg)
        t_times.append(time.time() - t0)
        t_utils.append(rec.utilization)
    rows.append({
        "method": "teacher",
        "min": min(t_utils), "avg": sum(t_utils) / len(t_utils), "max": max(t_utils),
        "mean_time_s": sum(t_times) / len(t_times),
    })

    if args.checkpoint:
        model, _, _, _ = load_checkpoint(_resolve(args.checkpoint))
        ecfg = _enhance_config(args)
        for batch in args.batches:
            d_utils, d_times = [], []
            for k, polys, strip in items:
                t0 = time.time()
                fn = model.make_score_fn(polys, strip)
                scfg = SampleConfig(steps=args.steps, batch=batch, rng_seed=args.seed + k)
                res = sample_rsde(fn, polys, strip, scfg, model.sched)
                best = (False, -1.0)
                for chain in res.instances:
                    enhanced, rep = enhance(chain, ecfg)
                    best = max(best, (rep.feasible, utilization(enhanced)))
                d_times.append(time.time() - t0)
                d_utils.append(best[1])
            rows.append({
                "method": f"diffusion+enhance (b={batch})",
                "min": min(d_utils), "avg": sum(d_utils) / len(d_utils), "max": max(d_utils),
                "mean_time_s": sum(d_times) / len(d_times),
            })

    with open(out, "w") as fp:
        fp.write("method,min,avg,max,mean_time_s\n")
        for r in rows:
            fp.write(
                f"{r['method']},{r['min']:.6f},{r['avg']:.6f},{r['max']:.6f},{r['mean_time_s']:.3f}\n"
            )
    print(f"{'method':<28} {'Min':>8} {'Avg':>8} {'Max':>8} {'time':>9}")
    for r in rows:
        print(
            f"{r['method']:<28} {100*r['min']:>7.2f}% {100*r['avg']:>7.2f}% "
            f"{100*r['max']:>7.2f}% {r['mean_time_s']:>8.3f}s"
        )
    _write_manifest(out, "bench", args, [args.checkpoint or ""], [out], started)
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="scorepack",
        description="2D irregular strip packing: teacher, diffusion sampler, enhancement",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0, help="master RNG seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="max parallel workers (determinism guaranteed at 1)")
        sp.add_argument("--config", default=None, help="TOML config file")

    g = sub.add_parser("generate", help="generate puzzle instances with ground truth")
    common(g)
    g.add_argument("--preset", choices=["square16", "square2", "arbitrary10", "custom"],
                   default="square16")
    g.add_argument("--side", type=float, default=2000.0, help="square boundary side")
    g.add_argument("--fragments", type=int, default=16, help="fragments for --preset custom")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--strip-height", type=float, default=None,
                   help="also convert ground truth to a strip of this height")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("teach", help="run the NFP+GA teacher over polygon draws")
    common(t)
    t.add_argument("--instances", default=None, help="puzzle JSONL to repack (optional)")
    t.add_argument("--count", type=int, default=None)
    t.add_argument("--side", type=float, default=2000.0)
    t.add_argument("--fragments", type=int, default=16)
    t.add_argument("--strip-height", type=float, default=None)
    t.add_argument("--angles", type=int, default=32)
    t.add_argument("--population", type=int, default=8)
    t.add_argument("--generations", type=int, default=8)
    t.add_argument("--restarts", type=int, default=10)
    t.add_argument("--mutation-rate", type=float, default=0.1)
    t.add_argument("--padding", type=float, default=0.0)
    t.add_argument("--no-scramble", action="store_true",
                   help="skip random initial rotations")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_teach)

    tr = sub.add_parser("train", help="train the score network on a corpus")
    common(tr)
    tr.add_argument("--corpus", required=True, help="teacher/puzzle records JSONL")
    tr.add_argument("--model-preset", choices=["toy", "paper"], default="toy")
    tr.add_argument("--steps", type=int, default=15000)
    tr.add_argument("--batch-size", type=int, default=32)
    tr.add_argument("--lr", type=float, default=2e-4)
    tr.add_argument("--weight-decay", type=float, default=1e-4)
    tr.add_argument("--sigma-min", type=float, default=0.1)
    tr.add_argument("--sigma-max", type=float, default=1000.0)
    tr.add_argument("--weighting", action="store_true",
                    help="sigmoid utilization weighting of the DSM loss")
    tr.add_argument("--log-every", type=int, default=100)
    tr.add_argument("--out", required=True, help="checkpoint path (.npz)")
    tr.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample pose batches from a trained model")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--instances", required=True, help="JSONL with polygons + container")
    s.add_argument("--count", type=int, default=None)
    s.add_argument("--batch", type=int, default=128, choices=None)
    s.add_argument("--steps", type=int, default=128)
    s.add_argument("--t-start", type=float, default=1.0)
    s.add_argument("--t-end", type=float, default=0.01)
    s.add_argument("--trajectory", default=None,
                   help="dump the selected chain of item 0 as JSONL")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    def enhance_flags(sp):
        sp.add_argument("--max-iters", type=int, default=100)
        sp.add_argument("--overlap-tol", type=float, default=1e-9,
                        help="relative to total polygon area")
        sp.add_argument("--gap-eps", type=float, default=1e-4)
        sp.add_argument("--damping", type=float, default=1.0)
        sp.add_argument("--repeats", type=int, default=1)

    e = sub.add_parser("enhance", help="resolve overlaps and compact gaps")
    common(e)
    e.add_argument("--instances", required=True)
    enhance_flags(e)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_enhance)

    ev = sub.add_parser("eval", help="print utilization/overlap/IoU/feasibility metrics")
    common(ev)
    ev.add_argument("--instances", required=True)
    ev.add_argument("--out", default=None, help="optional JSON metrics file")
    ev.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render instances or trajectories to SVG")
    common(r)
    r.add_argument("--instances", default=None)
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--trajectory", default=None, help="trajectory JSONL from sample")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    b = sub.add_parser("bench", help="compare teacher vs diffusion+enhancement")
    common(b)
    b.add_argument("--suite", choices=["micro4", "puzzle"], default="puzzle")
    b.add_argument("--count", type=int, default=8)
    b.add_argument("--side", type=float, default=2000.0)
    b.add_argument("--fragments", type=int, default=16)
    b.add_argument("--strip-height", type=float, default=None)
    b.add_argument("--checkpoint", default=None)
    b.add_argument("--batches", type=int, nargs="+", default=[128, 512])
    b.add_argument("--steps", type=int, default=128)
    b.add_argument("--angles", type=int, default=32)
    b.add_argument("--population", type=int, default=8)
    b.add_argument("--generations", type=int, default=8)
    b.add_argument("--restarts", type=int, default=10)
    b.add_argument("--mutation-rate", type=float, default=0.1)
    b.add_argument("--padding", type=float, default=0.0)
    enhance_flags(b)
    b.add_argument("--out", required=True, help="CSV output")
    b.set_defaults(func=cmd_bench)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args = _apply_config_defaults(parser, args)
    try:
        return args.func(args)
    except CliError:
        raise
    except PlacementImpossible as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
