"""``aptlm`` command line: render, train, eval, gradcheck, ablations and report figures."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import ablation, dataset, gradcheck
from . import evaluation as E
from . import model as M
from . import pipeline as P
from . import plotting
from .config import SMOKE, load_config, parse_config
from .errors import CheckpointError, ConfigError, ContractViolation, DependencyError, TrainingDiverged

EXIT_FAIL = 1
EXIT_ERROR = 2


def _config(args):
    if args.smoke:
        text = SMOKE
    elif args.config:
        text = Path(args.config).read_text()
    else:
        raise ConfigError("pass a config file or --smoke")
    text += "".join(f"\n{kv}" for kv in args.set or ())
    cfg = parse_config(text)
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    return cfg


def cmd_render(args):
    cfg = _config(args)
    root, counts = dataset.render_dataset(cfg, P.data_root(cfg))
    (root / "config.txt").write_text(cfg.dumps())
    return 0


def cmd_train(args):
    cfg = _config(args)
    model, losses = P.train(cfg, args.stage, resume=args.resume, from_scratch=args.from_scratch)
    if (cfg.out / "metrics.csv").exists():
        plotting.loss_curves(cfg.out / "metrics.csv", cfg.out / "loss_curves.png")
    return 0


def _embedder(cfg, task, metric):
    if metric == "map" or (task == "AT" and metric is None):
        return E.TextEmbedder.from_checkpoint(cfg, P.checkpoint_path(cfg, 0))
    return None


def cmd_eval(args):
    cfg = _config(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else P.final_checkpoint(cfg)
    metric = E.check_metric(args.task, args.metric)
    model = P.load_model(cfg, ckpt)
    root = P.data_root(cfg)
    if args.task == "FSC" and (args.ways or args.shots):
        ways, shots = args.ways or cfg.fsc_ways, args.shots or cfg.fsc_shots
        examples = E.fsc_examples(root, args.split, ways, shots, args.episodes, seed=cfg.seed)
        stem = f"FSC_{ways}way_{shots}shot_{metric}"
    else:
        if args.manifest:
            from .storage import read_manifest
            from .tasks import TaskExample
            examples = [TaskExample.from_record(r) for r in read_manifest(args.manifest)]
        else:
            examples = P.load_split(root, args.split, (args.task,))[args.task]
        stem = f"{args.task}_{metric}"
    if args.limit:
        examples = examples[:args.limit]
    store = M.FeatureStore(root, model)
    report = E.evaluate(model, store, examples, args.task, metric, _embedder(cfg, args.task, metric),
                        batch=cfg.eval_batch)
    out = Path(args.report_dir) if args.report_dir else cfg.out / "reports"
    report.write(out, stem)
    print(report.summary())
    return 0


def cmd_gradcheck(args):
    scopes = gradcheck.SCOPES if args.scope == "all" else (args.scope,)
    ok = True
    for scope in scopes:
        for r in gradcheck.run_scope(scope, args.seed):
            print(r.line())
            ok &= r.passed
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else EXIT_FAIL


def _ablate(args, axis):
    cfg = _config(args)
    out = Path(args.ablation_dir) if args.ablation_dir else cfg.out / "ablations"
    if not cfg.data_dir and (P.data_root(cfg) / "manifests").is_dir():
        cfg = cfg.replace(data_dir=str(P.data_root(cfg)))
    lm = args.lm_checkpoint
    if lm is None and args.scale == 1 and P.checkpoint_path(cfg, "lm").exists():
        lm = P.checkpoint_path(cfg, "lm")
    res = ablation.run_ablation(cfg, axis, out, scale=args.scale, lm_checkpoint=lm, eval_limit=args.limit)
    plotting.ablation_bars(res.rows, ablation.METRIC_COLS, res.csv_path.with_suffix(".png"), title=res.axis)
    print(res.summary_path.read_text(), end="")
    return EXIT_FAIL if any(r["status"] != "ok" for r in res.rows) else 0


def cmd_ablate(args):
    axes = list(ablation.AXES) if args.axis == "all" else [args.axis]
    code = 0
    for axis in axes:
        code = max(code, _ablate(args, axis))
    return code


def cmd_report(args):
    cfg = _config(args)
    out = cfg.out / "reports"
    out.mkdir(parents=True, exist_ok=True)
    if (cfg.out / "metrics.csv").exists():
        print(plotting.loss_curves(cfg.out / "metrics.csv", out / "loss_curves.png"))
    model = P.load_model(cfg, P.final_checkpoint(cfg))
    root = P.data_root(cfg)
    store = M.FeatureStore(root, model)
    sweep = {}
    for w in args.ways:
        ex = E.fsc_examples(root, "test", w, 1, args.episodes, seed=cfg.seed)
        sweep[w] = E.evaluate(model, store, ex, "FSC", batch=cfg.eval_batch).value
    with open(out / "fewshot_sweep.csv", "w") as fh:
        fh.write("ways,shots,episodes,exact_match\n")
        for w, v in sweep.items():
            fh.write(f"{w},1,{args.episodes},{v:.4f}\n")
    print(plotting.fewshot_sweep(sweep, out / "fewshot_sweep.png"))
    print(json.dumps({str(k): round(v, 4) for k, v in sweep.items()}))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="aptlm", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def with_config(sp):
        sp.add_argument("config", nargs="?", help="key=value config file")
        sp.add_argument("--smoke", action="store_true", help="use the built-in smoke config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        return sp

    with_config(sub.add_parser("render", help="render WAVs and task manifests")).set_defaults(fn=cmd_render)

    sp = with_config(sub.add_parser("train", help="train one stage or the whole curriculum"))
    sp.add_argument("--stage", default="all", choices=["lm", "0", "1", "2", "all", "single"])
    sp.add_argument("--resume", help="partial checkpoint to continue from")
    sp.add_argument("--from-scratch", action="store_true", help="do not require the previous stage's checkpoint")
    sp.set_defaults(fn=cmd_train)

    sp = with_config(sub.add_parser("eval", help="greedy-decode and score one task"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest", help="JSONL manifest (default: the split's manifest for --task)")
    sp.add_argument("--split", default="test", choices=list(dataset.SPLITS))
    sp.add_argument("--task", required=True)
    sp.add_argument("--metric", choices=list(E.METRICS))
    sp.add_argument("--ways", type=int)
    sp.add_argument("--shots", type=int)
    sp.add_argument("--episodes", type=int, default=200)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--report-dir")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    sp.add_argument("--scope", default="all", choices=[*gradcheck.SCOPES, "all"])
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gradcheck)

    def with_ablation(sp):
        with_config(sp)
        sp.add_argument("--scale", type=float, default=1.0, help="multiply every step budget")
        sp.add_argument("--lm-checkpoint", help="pretrained LM shared by arms with a matching LM config")
        sp.add_argument("--limit", type=int, help="evaluate at most this many items per task")
        sp.add_argument("--ablation-dir")
        return sp

    with_ablation(sub.add_parser("ablate-aligner", help="linear vs transformer aligner")).set_defaults(
        fn=lambda a: _ablate(a, "aligner-arch"))
    with_ablation(sub.add_parser("ablate-tokens", help="16 / 32 / 64 acoustic tokens")).set_defaults(
        fn=lambda a: _ablate(a, "tokens"))
    sp = with_ablation(sub.add_parser("ablate", help="any ablation axis"))
    sp.add_argument("--axis", required=True, choices=[*ablation.AXES, *ablation.ALIASES, "all"])
    sp.set_defaults(fn=cmd_ablate)

    sp = with_config(sub.add_parser("report", help="loss curves and the few-shot sweep"))
    sp.add_argument("--ways", type=int, nargs="+", default=[2, 3, 4, 5, 6, 8])
    sp.add_argument("--episodes", type=int, default=200)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractViolation, DependencyError, CheckpointError, TrainingDiverged, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
