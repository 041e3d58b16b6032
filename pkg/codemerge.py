# codemerge.py
import argparse
import logging
import sys
from dataclasses import replace

from codebook import Codebook
from fingerprint import compute_fingerprint, make_projection, pool_features
from helpers import CodeMergeError, ConfigError, FormatError, ParameterError, ToleranceError, make_rng, setup_logging
from merging import TIE_BREAKS, SignPolicy
from plugin_registry import plugin_registry, plugins_for
from plugin_settings import LOG_LEVEL, Option, optional_int, parse_bool, resolve_settings
from probes import fingerprint_weight_correlation, hessian_rls_check, lmc_barrier, toy_lmc_pair
from scoring import DIVISOR_MODES, SELECTIONS, ScoringConfig
from tensor_store import Checkpoint, Tensor, checkpoint_load, checkpoint_save
from tta_sim import (
    DEFAULT_SCHEDULE,
    EVAL_MODELS,
    LABEL_MODES,
    SHIFT_KINDS,
    ShiftSpec,
    SimConfig,
    StreamConfig,
    post_shift_mean_loss,
    run_method,
    write_trace,
)

logger = logging.getLogger("codemerge")


def format_schedule(schedule):
    return ",".join(f"{s.start_step}:{s.kind}:{s.magnitude}" for s in schedule) or "none"


def parse_schedule(text):
    text = str(text).strip()
    if text.lower() in ("", "none"):
        return ()
    specs = []
    for item in text.split(","):
        try:
            start, kind, magnitude = item.strip().split(":")
            specs.append(ShiftSpec(int(start), kind.strip(), float(magnitude)))
        except ValueError:
            raise ValueError(f"schedule item {item!r} is not start:kind:magnitude")
    return tuple(specs)


def comma_list(cast):
    """Parser for `a,b,c` option values; lists pass through unchanged."""
    def parse(value):
        if isinstance(value, (list, tuple)):
            return tuple(cast(v) for v in value)
        items = [item.strip() for item in str(value).split(",") if item.strip()]
        if not items:
            raise ValueError("expected a comma-separated list")
        return tuple(cast(item) for item in items)
    return parse


SEED = Option("--seed", int, 0, "random seed (CODEMERGE_SEED overrides)")

STREAM_OPTIONS = [
    SEED,
    Option("--steps", int, 40, "number of stream batches"),
    Option("--batch-size", int, 32, "samples per batch"),
    Option("--d-raw", int, 32, "raw input dimension"),
    Option("--d", int, 64, "extractor feature dimension"),
    Option("--d-prime", int, 16, "fingerprint dimension"),
    Option("--label-noise", float, StreamConfig.label_noise_sigma, "label noise standard deviation"),
    Option("--schedule", parse_schedule, format_schedule(DEFAULT_SCHEDULE),
           f"shift schedule start:kind:magnitude,... with kinds {', '.join(SHIFT_KINDS)}, or none"),
    Option("--lr", float, SimConfig.lr, "head learning rate"),
    Option("--grad-steps", int, SimConfig.n_grad_steps, "gradient steps per batch"),
    Option("--head-lambda", float, SimConfig.head_lambda, "ridge penalty of the head objective"),
    Option("--label-mode", str, "ground_truth", "training targets", choices=LABEL_MODES),
    Option("--eval-model", str, "merged", "model whose loss is reported", choices=EVAL_MODELS),
]

SCORING_OPTIONS = [
    Option("--k", int, 5, "number of checkpoints to merge"),
    Option("--lambda", float, ScoringConfig.ridge_lambda, "ridge leverage regularizer"),
    Option("--divisor", str, "row_count", "covariance divisor", choices=DIVISOR_MODES),
    Option("--selection", str, "leverage", "checkpoint selection strategy", choices=SELECTIONS),
    Option("--include-latest", parse_bool, True, "always merge the newest checkpoint"),
    Option("--window", optional_int, None, "score only the most recent N entries"),
    Option("--jitter", float, 1e-6, "kernel jitter for mos"),
    Option("--clamp-negative", parse_bool, False, "clamp negative mos weights to zero"),
    Option("--tie-break", str, "highest_score_sign", "sign tie rule", choices=TIE_BREAKS),
    Option("--renormalize", parse_bool, False, "rescale surviving weights per coordinate"),
]

COMMANDS = {
    "fingerprint": [
        Option("--features", str, None, "CMCK file holding a tensor named 'features'", required=True),
        Option("--d-prime", int, 16, "fingerprint dimension"),
        SEED,
        Option("--out", str, None, "output CMCK file", required=True),
    ],
    "merge": [
        Option("--codebook", str, None, "CMIX codebook index", required=True),
        Option("--method", str, "codemerge", "merge method", choices=tuple(plugins_for("cli"))),
        Option("--beta", float, None, "EMA decay, required by --method ema"),
        *SCORING_OPTIONS,
        SEED,
        Option("--out", str, None, "output CMCK file", required=True),
    ],
    "simulate": [
        Option("--method", str, "codemerge", "simulator method", choices=tuple(plugins_for("sim"))),
        Option("--beta", float, 0.99, "EMA decay"),
        *SCORING_OPTIONS,
        *STREAM_OPTIONS,
        Option("--trace-out", str, None, "write the step trace here"),
        Option("--codebook-out", str, None, "write the final codebook (CMIX) here"),
        Option("--compare", parse_bool, False, "run every simulator method and print one line each"),
    ],
    "lmc-check": [
        *STREAM_OPTIONS,
        Option("--grid", int, 11, "interpolation grid points"),
        Option("--epochs", int, 3, "passes over the data per fine-tuned head"),
        Option("--tolerance", float, None, "fail (exit 5) when the barrier exceeds this"),
    ],
    "correlate": [
        Option("--codebook", str, None, "CMIX codebook index; runs a fresh simulation when omitted"),
        *SCORING_OPTIONS,
        *STREAM_OPTIONS,
        Option("--min-pearson", float, None, "fail (exit 5) below this Pearson r"),
        Option("--min-kendall", float, None, "fail (exit 5) below this Kendall tau"),
    ],
    "sweep": [
        *SCORING_OPTIONS,
        *STREAM_OPTIONS,
        Option("--selections", comma_list(str), ",".join(SELECTIONS), "selection strategies to sweep"),
        Option("--ks", comma_list(int), "3,5,9", "merge sizes K to sweep"),
        Option("--d-primes", comma_list(int), "8,16,32", "fingerprint dimensions to sweep"),
        Option("--baselines", parse_bool, True, "also print naive_sequential and no_adapt reference lines"),
    ],
    "hessian-check": [
        SEED,
        Option("--n", int, 16, "fingerprints per random instance"),
        Option("--d-prime", int, 16, "fingerprint dimension"),
        Option("--lambda", float, 0.1, "ridge regularizer"),
        Option("--trials", int, 100, "random instances"),
        Option("--tolerance", float, 1e-8, "maximum allowed relative error"),
    ],
}


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise ParameterError(message)


def build_parser():
    parser = CliParser(prog="codemerge", description="Codebook-guided checkpoint merging for test-time adaptation.")
    parser.add_argument("--log-level", default=None, help=f"log level (default: {LOG_LEVEL})")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)
    for name, options in COMMANDS.items():
        cmd = sub.add_parser(name, help=f"run the {name} command")
        cmd.add_argument("--config", default=None, help="key = value config file (default: none)")
        for opt in dict.fromkeys(options):
            kwargs = {"dest": opt.dest, "default": None, "help": opt.help_text()}
            if opt.type is parse_bool:
                kwargs["action"] = argparse.BooleanOptionalAction
            else:
                kwargs["type"] = opt.type
                if opt.choices:
                    kwargs["choices"] = opt.choices
            cmd.add_argument(opt.flag, **kwargs)
    return parser


def scoring_from(settings):
    return ScoringConfig(
        ridge_lambda=settings["lambda"],
        divisor_mode=settings["divisor"],
        top_k=settings["k"],
        ema_beta=settings["beta"] if settings.get("beta") is not None else ScoringConfig.ema_beta,
        kernel_jitter=settings["jitter"],
        clamp_negative=settings["clamp_negative"],
        selection=settings["selection"],
        include_latest=settings["include_latest"],
        window=settings["window"],
        seed=settings["seed"],
    )


def policy_from(settings):
    return SignPolicy(tie_break=settings["tie_break"], renormalize_per_coordinate=settings["renormalize"])


def stream_from(settings):
    return StreamConfig(
        d_raw=settings["d_raw"],
        d=settings["d"],
        batch_size=settings["batch_size"],
        n_steps=settings["steps"],
        shift_schedule=parse_schedule(settings["schedule"]) if isinstance(settings["schedule"], str) else settings["schedule"],
        label_noise_sigma=settings["label_noise"],
        seed=settings["seed"],
    ).validate()


def sim_from(settings):
    return SimConfig(
        d_prime=settings["d_prime"],
        lr=settings["lr"],
        n_grad_steps=settings["grad_steps"],
        head_lambda=settings["head_lambda"],
        label_mode=settings["label_mode"],
        eval_model=settings["eval_model"],
    )


#############################
# Commands
#############################

def cmd_fingerprint(settings):
    source = checkpoint_load(settings["features"])
    if "features" not in source.names:
        raise FormatError(f"{settings['features']} has no tensor named 'features'", field="features")
    pooled = pool_features(source["features"])
    projection = make_projection(pooled.size, settings["d_prime"], settings["seed"])
    fp = compute_fingerprint(pooled, projection, source.step)
    checkpoint_save(Checkpoint(fp.step, {"fingerprint": Tensor((fp.d_prime,), fp.values)}), settings["out"])
    print(f"l2_norm={fp.norm()!r}")
    return 0


def cmd_merge(settings):
    plugin = plugin_registry[settings["method"]]
    plugin.check_settings(settings)
    codebook = Codebook.load(settings["codebook"])
    plan, merged = plugin.handle_cli(codebook, scoring_from(settings), policy_from(settings))
    checkpoint_save(merged, settings["out"])
    print(plan.to_json())
    return 0


def _summary(trace, cfg):
    return (
        f"method={trace.method} steps={len(trace.records)} "
        f"mean_loss={trace.mean_loss()!r} post_shift_loss={post_shift_mean_loss(trace, cfg)!r}"
    )


def cmd_simulate(settings):
    cfg, sim = stream_from(settings), sim_from(settings)
    scoring, policy = scoring_from(settings), policy_from(settings)
    trace = run_method(cfg, settings["method"], scoring=scoring, policy=policy, sim=sim)
    if settings["trace_out"]:
        write_trace(trace, settings["trace_out"])
    if settings["codebook_out"]:
        trace.codebook.save(settings["codebook_out"])
    print(_summary(trace, cfg))
    if settings["compare"]:
        for method in plugins_for("sim"):
            if method != settings["method"]:
                print(_summary(run_method(cfg, method, scoring=scoring, policy=policy, sim=sim), cfg))
    return 0


def cmd_lmc_check(settings):
    theta_a, theta_b, loss_fn = toy_lmc_pair(stream_from(settings), sim_from(settings), n_epochs=settings["epochs"])
    report = lmc_barrier(theta_a, theta_b, loss_fn, settings["grid"])
    print(
        f"barrier={report.max_deviation!r} grid={len(report.curve)} "
        f"loss_a={report.curve[0].loss!r} loss_b={report.curve[-1].loss!r}"
    )
    tolerance = settings["tolerance"]
    if tolerance is not None and report.max_deviation > tolerance:
        raise ToleranceError(f"LMC barrier {report.max_deviation} exceeds tolerance {tolerance}")
    return 0


def cmd_correlate(settings):
    if settings["codebook"]:
        codebook = Codebook.load(settings["codebook"])
    else:
        cfg = stream_from(settings)
        codebook = run_method(cfg, "codemerge", scoring=scoring_from(settings),
                              policy=policy_from(settings), sim=sim_from(settings)).codebook
    report = fingerprint_weight_correlation(codebook)
    print(f"pearson={report.pearson_r!r} kendall={report.kendall_tau!r} pairs={report.pairs}")
    failures = []
    if settings["min_pearson"] is not None and report.pearson_r < settings["min_pearson"]:
        failures.append(f"pearson {report.pearson_r} < {settings['min_pearson']}")
    if settings["min_kendall"] is not None and report.kendall_tau < settings["min_kendall"]:
        failures.append(f"kendall {report.kendall_tau} < {settings['min_kendall']}")
    if failures:
        raise ToleranceError("; ".join(failures))
    return 0


def cmd_sweep(settings):
    """Ablation grid over selection strategy, K and fingerprint dimension; one line per cell."""
    cfg, sim = stream_from(settings), sim_from(settings)
    scoring, policy = scoring_from(settings), policy_from(settings)
    selections = comma_list(str)(settings["selections"])
    ks = comma_list(int)(settings["ks"])
    d_primes = comma_list(int)(settings["d_primes"])
    if settings["baselines"]:
        for method in ("naive_sequential", "no_adapt"):
            print(_summary(run_method(cfg, method, scoring=scoring, policy=policy, sim=sim), cfg))
    logger.info(f"Sweeping {len(selections) * len(ks) * len(d_primes)} settings")
    for selection in selections:
        for k in ks:
            for d_prime in d_primes:
                trace = run_method(
                    cfg, "codemerge", scoring=replace(scoring, selection=selection, top_k=k),
                    policy=policy, sim=replace(sim, d_prime=d_prime),
                )
                print(
                    f"selection={selection} k={k} d_prime={d_prime} "
                    f"mean_loss={trace.mean_loss()!r} post_shift_loss={post_shift_mean_loss(trace, cfg)!r}"
                )
    return 0


def cmd_hessian_check(settings):
    if settings["n"] < 1 or settings["d_prime"] < 1 or settings["trials"] < 1:
        raise ParameterError("--n, --d-prime and --trials must be positive")
    worst = 0.0
    for trial in range(settings["trials"]):
        Z = make_rng(settings["seed"], trial).standard_normal((settings["n"], settings["d_prime"]))
        worst = max(worst, hessian_rls_check(Z, settings["lambda"]))
    print(f"max_rel_error={worst!r} trials={settings['trials']}")
    if worst > settings["tolerance"]:
        raise ToleranceError(f"max relative error {worst} exceeds {settings['tolerance']}")
    return 0


HANDLERS = {
    "fingerprint": cmd_fingerprint,
    "merge": cmd_merge,
    "simulate": cmd_simulate,
    "lmc-check": cmd_lmc_check,
    "correlate": cmd_correlate,
    "sweep": cmd_sweep,
    "hessian-check": cmd_hessian_check,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0
    except CodeMergeError as e:
        setup_logging(LOG_LEVEL)
        logger.error(f"{e}")
        return e.exit_code
    setup_logging(args.log_level or LOG_LEVEL)
    try:
        settings = resolve_settings(args, COMMANDS[args.command], args.config)
        return HANDLERS[args.command](settings)
    except CodeMergeError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except ValueError as e:
        # Bad values inside otherwise well-formed configs (e.g. shift schedules).
        logger.error(f"{args.command} failed: {e}")
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
