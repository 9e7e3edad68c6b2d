"""Batch command-line front end.

Subcommands: plan, simulate, batch, pem-fit, grit-train, grit-verify,
rules-check. Exit codes: 0 success, 1 usage error, 2 validation error,
3 solver degraded (a fallback was used in `plan`).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from pathlib import Path

from . import pem as pem_mod
from . import planner as planner_mod
from . import prediction as pred_mod
from . import rules as rules_mod
from . import simulator as sim_mod
from . import milp, nlp
from .world import ParseError, ValidationError, load_scenario

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_DEGRADED = 3


def _read(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _load_scenario_file(path: str):
    return load_scenario(_read(path))


def _planner_config(args) -> planner_mod.PlannerConfig:
    rules_list = ()
    if getattr(args, "rules", None):
        rules_list = tuple(rules_mod.load_rules(_read(args.rules)))
    budget = nlp.NlpBudget()
    if getattr(args, "nlp_budget", None) is not None:
        budget = nlp.NlpBudget(max_outer=args.nlp_budget,
                               max_inner=nlp.NlpBudget().max_inner)
    return planner_mod.PlannerConfig(rule_constraints=rules_list,
                                     nlp_budget=budget)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_plan(args) -> int:
    scenario = _load_scenario_file(args.scenario)
    config = _planner_config(args)
    result = planner_mod.plan_cycle(scenario, None, config)
    doc = {
        "source": result.source,
        "milp": result.milp_summary,
        "nlp": result.nlp_summary,
        "trajectory": [
            {"x": st.x, "y": st.y, "heading": st.heading, "speed": st.speed,
             "accel": st.accel, "steer": st.steer}
            for st in result.trajectory.states],
    }
    if args.dump_milp:
        problem = milp.build_milp(scenario, None, config.milp_weights,
                                  config.rule_constraints or None)
        doc["milp_dump"] = milp.dump_problem(problem)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK if result.source == "NlpConverged" else EXIT_DEGRADED


def _sim_config(args, steps: int) -> sim_mod.SimConfig:
    pem_params = None
    if args.pem:
        pem_params = pem_mod.params_from_json(_read(args.pem))
    trees = None
    if getattr(args, "trees", None):
        trees = pred_mod.trees_from_json(_read(args.trees))
    prediction = {"inverse": "inverse", "trees": "trees", "cv": "cv"}[args.prediction]
    return sim_mod.SimConfig(
        steps=steps, seed=args.seed,
        perception={"gt": "gt", "surrogate": "surrogate"}[args.perception],
        prediction=prediction, pem_params=pem_params, trees=trees,
        planner=_planner_config(args))


def cmd_simulate(args) -> int:
    scenario = _load_scenario_file(args.scenario)
    config = _sim_config(args, args.steps)
    trace = sim_mod.run_sim(scenario, config)
    metrics = sim_mod.evaluate(trace)
    out = _out_dir(args)
    name = Path(args.scenario).stem
    (out / f"{name}.trace.jsonl").write_text(
        sim_mod.trace_to_jsonl(trace), encoding="utf-8")
    header = sim_mod.METRICS_CSV_HEADER
    row = sim_mod.metrics_csv_row(name, metrics)
    if args.timing:
        header += sim_mod.TIMING_CSV_SUFFIX
        row = sim_mod.metrics_csv_row(name, metrics, include_timing=True)
    (out / f"{name}.metrics.csv").write_text(header + "\n" + row + "\n",
                                             encoding="utf-8")
    if args.svg:
        (out / f"{name}.svg").write_text(sim_mod.trace_to_svg(trace),
                                         encoding="utf-8")
    print(header)
    print(row)
    return EXIT_OK


def _batch_one(item):
    path, args_dict, steps = item
    scenario = load_scenario(Path(path).read_text(encoding="utf-8"))
    ns = argparse.Namespace(**args_dict)
    config = _sim_config(ns, steps)
    trace = sim_mod.run_sim(scenario, config)
    return Path(path).stem, sim_mod.evaluate(trace)


def cmd_batch(args) -> int:
    manifest = json.loads(_read(args.manifest))
    unknown = set(manifest) - {"scenarios", "steps", "seed"}
    if unknown:
        raise ValidationError(f"manifest: unknown field(s) {sorted(unknown)}")
    paths = manifest["scenarios"]
    base = Path(args.manifest).parent
    resolved = []
    for p in paths:
        full = Path(p) if Path(p).is_absolute() else base / p
        if not full.exists():
            raise ValidationError(f"scenario path not found: {full}")
        resolved.append(str(full))
    steps = int(manifest.get("steps", 50))
    seed = int(manifest.get("seed", args.seed))
    args_dict = {"pem": args.pem, "trees": getattr(args, "trees", None),
                 "prediction": args.prediction, "perception": args.perception,
                 "seed": seed, "rules": args.rules, "nlp_budget": None}
    items = [(p, args_dict, steps) for p in resolved]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_batch_one, items))
    else:
        results = [_batch_one(it) for it in items]
    results.sort(key=lambda kv: kv[0])       # deterministic merge by scenario id
    out = _out_dir(args)
    lines = [sim_mod.METRICS_CSV_HEADER]
    for name, metrics in results:
        lines.append(sim_mod.metrics_csv_row(name, metrics))
    text = "\n".join(lines) + "\n"
    (out / "metrics.csv").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_pem_fit(args) -> int:
    frames = pem_mod.load_log(_read(args.log))
    params = pem_mod.fit_pem(frames, gate=args.gate)
    text = pem_mod.params_to_json(params)
    out = _out_dir(args)
    (out / "pem_params.json").write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_grit_train(args) -> int:
    dataset = pred_mod.load_dataset(_read(args.dataset))
    trees = pred_mod.grit_train(dataset, depth_limit=args.depth,
                                min_leaf=args.min_leaf)
    text = pred_mod.trees_to_json(trees)
    out = _out_dir(args)
    (out / "trees.json").write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_grit_verify(args) -> int:
    trees = pred_mod.trees_from_json(_read(args.trees))
    doc = json.loads(_read(args.property))
    unknown = set(doc) - {"box", "asserted_goal"}
    if unknown:
        raise ValidationError(f"property: unknown field(s) {sorted(unknown)}")
    prop = pred_mod.TreeProperty(
        box=tuple((float(lo), float(hi)) for lo, hi in doc["box"]),
        asserted_goal=str(doc["asserted_goal"]))
    witness = pred_mod.grit_verify(trees, prop)
    if witness is None:
        print("Verified")
        return EXIT_OK
    print("Counterexample: " + json.dumps(list(witness.features)))
    return EXIT_DEGRADED


def cmd_rules_check(args) -> int:
    phi = rules_mod.parse_rule(_read(args.rule).strip())
    print(rules_mod.format_rule(phi))
    if args.trace:
        trace = json.loads(_read(args.trace))
        rho = rules_mod.robustness(phi, trace)
        print(f"robustness: {rho:.6g}")
        return EXIT_OK if rho > 0 else EXIT_DEGRADED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="planstack",
        description="Two-stage trajectory planning, prediction, perception "
                    "error modelling, and closed-loop simulation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, sim=False):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--rules", default=None, help="rule file (one formula per line)")
        if sim:
            sp.add_argument("--pem", default=None, help="PEM params JSON")
            sp.add_argument("--trees", default=None, help="trained trees JSON")
            sp.add_argument("--prediction", choices=["inverse", "trees", "cv"],
                            default="cv")
            sp.add_argument("--perception", choices=["gt", "surrogate"],
                            default="gt")

    sp = sub.add_parser("plan", help="run one planning cycle")
    sp.add_argument("scenario")
    sp.add_argument("--nlp-budget", type=int, default=None, dest="nlp_budget",
                    help="max outer iterations for the refinement stage")
    sp.add_argument("--dump-milp", action="store_true", dest="dump_milp",
                    help="include a text dump of the mixed-integer problem")
    common(sp)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="run one closed-loop scenario")
    sp.add_argument("scenario")
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--svg", action="store_true", help="emit an overhead SVG plot")
    sp.add_argument("--timing", action="store_true",
                    help="include wall-clock columns in the metrics CSV")
    common(sp, sim=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("batch", help="run a manifest of scenarios in parallel")
    sp.add_argument("manifest")
    sp.add_argument("--jobs", type=int, default=1)
    common(sp, sim=True)
    sp.set_defaults(func=cmd_batch)

    sp = sub.add_parser("pem-fit", help="fit a perception error model from a log")
    sp.add_argument("log")
    sp.add_argument("--gate", type=float, default=2.0)
    common(sp)
    sp.set_defaults(func=cmd_pem_fit)

    sp = sub.add_parser("grit-train", help="train goal-recognition trees")
    sp.add_argument("dataset")
    sp.add_argument("--depth", type=int, default=4)
    sp.add_argument("--min-leaf", type=int, default=1, dest="min_leaf")
    common(sp)
    sp.set_defaults(func=cmd_grit_train)

    sp = sub.add_parser("grit-verify", help="verify a tree property")
    sp.add_argument("trees")
    sp.add_argument("property")
    common(sp)
    sp.set_defaults(func=cmd_grit_verify)

    sp = sub.add_parser("rules-check", help="parse a rule; evaluate robustness")
    sp.add_argument("rule", help="file containing one formula")
    sp.add_argument("--trace", default=None,
                    help="JSON file mapping signal name to per-step values")
    common(sp)
    sp.set_defaults(func=cmd_rules_check)

    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ParseError, ValidationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
