"""gpcircuits command-line interface."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import ConfigError, load_config
from .model import TrainingDiverged
from .probe import ProbeTrainingDiverged
from .sae import SaeTrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

NUMERICAL_ERRORS = (TrainingDiverged, SaeTrainingDiverged, ProbeTrainingDiverged, FloatingPointError)

log = logging.getLogger("gpcircuits")


def _structures(s: str | None):
    return [x.strip() for x in s.split(",") if x.strip()] if s else None


def _cmd_gen_grammar(run, args):
    pipeline.gen_grammar(run)


def _cmd_train_lm(run, args):
    ev = pipeline.train_lm_stage(run)
    print(f"heldout perplexity {ev['heldout_perplexity']:.4f}  unigram {ev['unigram_perplexity']:.4f}")


def _cmd_collect_acts(run, args):
    pipeline.collect_acts(run)


def _cmd_train_sae(run, args):
    met = pipeline.train_saes(run, _structures(args.sites))
    for site, m in met.items():
        print(f"{site}\tl0 {m.get('l0', float('nan')):.2f}\tfve {m.get('variance_explained', float('nan')):.4f}")


def _cmd_behavioral(run, args):
    sys.stdout.write(pipeline.behavioral(run, args.model, args.stimuli))


def _cmd_attribute(run, args):
    for k, v in pipeline.attribute(run, args.method, args.metric, _structures(args.structures)).items():
        print(f"{k}\t{v} scores")


def _cmd_extract_circuit(run, args):
    for k, v in pipeline.extract_circuits(run, _structures(args.structures)).items():
        print(f"{k}\t{v} nodes")


def _cmd_faithfulness(run, args):
    res = pipeline.faithfulness_stage(run, args.circuit, _structures(args.structures))
    for st, v in res.items():
        if isinstance(v, float):
            print(f"{st}\tF {v:.6f}")
        else:
            for row in v:
                print(f"{st}\t" + "\t".join(str(x) for x in row))


def _cmd_intervene(run, args):
    if args.clamp_high is not None:
        run.cfg.intervention.clamp_high = args.clamp_high
    res = pipeline.intervene(run, _structures(args.structures), args.control_seeds)
    for st, s in res.items():
        print(f"{st}\t{s}")


def _cmd_probe_train(run, args):
    pipeline.probe_train(run)


def _cmd_probe_eval(run, args):
    for r in pipeline.probe_eval(run):
        print(r)


def _cmd_probe_reading(run, args):
    for r in pipeline.probe_reading_stage(run):
        print("\t".join(str(x) for x in r))


def _cmd_compare_circuits(run, args):
    pipeline.compare_circuits(run, args.draws)


def _cmd_report(run, args):
    pipeline.report(run)


COMMANDS = {
    "gen-grammar": (_cmd_gen_grammar, "generate corpus, treebank and garden-path stimuli"),
    "train-lm": (_cmd_train_lm, "train the language model"),
    "collect-acts": (_cmd_collect_acts, "cache site activations for SAE training"),
    "train-sae": (_cmd_train_sae, "train one SAE per configured site"),
    "behavioral": (_cmd_behavioral, "p(GP) and p(non-GP) per structure and condition"),
    "attribute": (_cmd_attribute, "feature attribution scores"),
    "extract-circuit": (_cmd_extract_circuit, "threshold scores into circuits"),
    "faithfulness": (_cmd_faithfulness, "circuit faithfulness and threshold sweep"),
    "intervene": (_cmd_intervene, "clamp feature groups with random controls"),
    "probe-train": (_cmd_probe_train, "train parse-action probes"),
    "probe-eval": (_cmd_probe_eval, "UAS/UUAS and action accuracy of probes"),
    "probe-reading": (_cmd_probe_reading, "probe action probabilities on stimuli"),
    "compare-circuits": (_cmd_compare_circuits, "circuit overlap and probe-feature recall"),
    "report": (_cmd_report, "collect outputs into report.md"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpcircuits", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML run configuration (defaults apply when omitted)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    ps = {}
    for name, (_, help_) in COMMANDS.items():
        ps[name] = sub.add_parser(name, parents=[common], help=help_)
    ps["train-sae"].add_argument("--sites", help="comma-separated subset of sites")
    ps["behavioral"].add_argument("--model", help="model checkpoint (path without suffix)")
    ps["behavioral"].add_argument("--stimuli", help="stimuli TSV")
    ps["attribute"].add_argument("--method", choices=["atp", "atp_ig", "exact"])
    ps["attribute"].add_argument("--metric", choices=["prob_diff", "logit_diff", "linear-test"])
    for name in ("attribute", "extract-circuit", "faithfulness", "intervene"):
        ps[name].add_argument("--structures", help="comma-separated structures")
    ps["faithfulness"].add_argument("--circuit", help="score this circuit file instead of running the sweep")
    ps["intervene"].add_argument("--clamp-high", type=float, help="fixed high clamp value for every site")
    ps["intervene"].add_argument("--control-seeds", type=int, help="number of random-control seeds")
    ps["compare-circuits"].add_argument("--draws", type=int, default=1000, help="random draws for the recall baseline")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.threads is not None and args.threads < 1:
            raise ConfigError(["--threads: must be >= 1"])
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing artifact: {e.filename or e}", file=sys.stderr)
        return EXIT_MISSING
    out = Path(args.out or cfg.output_dir)
    opts = {k: v for k, v in vars(args).items() if k not in ("config", "out", "threads", "verbose", "command")}
    run = pipeline.Run(args.command, cfg, out, opts)
    fn = COMMANDS[args.command][0]
    try:
        with threadpool_limits(limits=args.threads):
            fn(run, args)
        run.finish()
    except pipeline.MissingArtifact as e:
        print(str(e), file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
