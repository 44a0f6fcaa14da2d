"""
Command-line interface
predict, heatmap, timeline, sim, tune-*, scale-analysis, ingest-profile and show-defaults
"""
import argparse
import os
import sys
from dataclasses import asdict, replace

from profiles.defaults import DEFAULTS_LABEL
from profiles.profile_store import ProfileStore, default_profiles, ingest_nccl_log, load_profiles, \
    resolve_profiles
from simulator.chrome_trace import chrome_trace_json
from simulator.schedule_sim import SimInput, sim_input_from_breakdown, simulate

from . import reporting
from .config import Config
from .cost_model import CostOptions, predict
from .errors import InvalidSpec, MalformedRow, TunerError
from .specs import config_to_dict, describe, dump_config, load_config, validate
from .traffic_model import build_traffic_matrix, map_ranks, timeline_from_breakdown
from .tuner import TuneRequest, scale_analysis, tune_micro_batch, tune_parallelism
from .utils import get_logger, input_digest, log_action, setup_logging

logger = get_logger('cli')

COMMANDS_WITHOUT_CONFIG = ('ingest-profile', 'show-defaults')


def _int_list(text):
    try:
        values = [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("expected positive integers")
    return values


def build_parser():
    """Argument parser with one subparser per command"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML file with model, parallel and platform sections')
    common.add_argument('--profile', action='append', default=[],
                        help='Bandwidth or utilization CSV (repeatable, later files win)')
    common.add_argument('--out', default=None, help='Output directory')
    common.add_argument('--strict-mapping', action='store_true', default=None,
                        help='Reject TP groups that span machines')
    common.add_argument('--no-recompute', action='store_true', help='Disable activation recomputation')
    common.add_argument('--interleave', type=int, default=None, metavar='V', help='Model chunks per stage')
    common.add_argument('--k-active', type=int, choices=(1, 2), default=None, help='Experts per token')
    common.add_argument('--format', choices=('csv', 'txt'), default='txt')
    common.add_argument('--log-level', default=None)
    common.add_argument('--workers', type=int, default=None, help='Tuner worker threads')

    parser = argparse.ArgumentParser(prog=Config.TOOL_NAME,
                                     description='Performance modeling and configuration tuning for LLM training')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('predict', parents=[common], help='Iteration time breakdown')
    sub.add_parser('heatmap', parents=[common], help='Per-class traffic matrices')
    sub.add_parser('timeline', parents=[common], help='On-Off timeline of one rank')

    sim = sub.add_parser('sim', parents=[common], help='Simulate the pipeline schedule')
    sim.add_argument('--uniform', action='store_true',
                     help='Unit compute per micro-batch and zero communication')

    for name in ('tune-microbatch', 'tune-parallelism'):
        tune = sub.add_parser(name, parents=[common])
        tune.add_argument('--micro-batches', type=_int_list, default=None, help='Restrict b, e.g. 1,2,4')

    scale = sub.add_parser('scale-analysis', parents=[common], help='Data-parallel scaling sweep')
    scale.add_argument('--dp-range', type=_int_list, required=True, help='Data-parallel degrees, e.g. 1,2,4,8')
    scale.add_argument('--micro-batches', type=_int_list, default=None)
    scale.add_argument('--token-budget', type=float, default=None, help='Training tokens')
    scale.add_argument('--rent-rate', type=float, default=None, help='Currency per GPU-hour')
    scale.add_argument('--gpu-price', type=float, default=None, help='Currency per GPU')
    scale.add_argument('--cross-product', action='store_true', help='Re-search (t, p) at every d')

    ingest = sub.add_parser('ingest-profile', parents=[common], help='Validate profiles into a store')
    ingest.add_argument('--nccl-log', action='append', default=[], help='Raw benchmark stdout (repeatable)')
    ingest.add_argument('--op', default=None, help='Op kind or benchmark binary for --nccl-log')
    ingest.add_argument('--locality', choices=('intra', 'inter'), default=None)
    ingest.add_argument('--topology', default=None)
    ingest.add_argument('--nranks', type=int, default=None)

    sub.add_parser('show-defaults', parents=[common], help='Print bundled profiles and settings')
    return parser


def _cost_options(args):
    return CostOptions.from_config(recompute=False if args.no_recompute else None, k_active=args.k_active)


def _read_text(path):
    """Raw profile input; unreadable paths fail like unreadable profile CSVs"""
    try:
        with open(path, 'r') as f:
            return f.read()
    except OSError as e:
        raise MalformedRow(f"{path}: {e.strerror or e}", path=str(path))


def _load_inputs(args):
    """Specs, profiles and cost options with CLI overrides applied"""
    if not args.config:
        raise InvalidSpec(f"--config is required for {args.command}")
    model, parallel, platform = load_config(args.config)
    if args.interleave is not None:
        parallel = replace(parallel, interleave=args.interleave)
    profiles = resolve_profiles(args.profile)
    return model, parallel, platform, profiles, _cost_options(args)


def _digest(args, model, parallel, platform, profiles, options, **extra):
    """Digest of everything that determines the outputs; no paths or timestamps"""
    return input_digest({
        'command': args.command,
        'config': config_to_dict(model, parallel, platform),
        'options': asdict(options),
        'strict': args.strict_mapping,
        'profiles': [profiles.bandwidth.to_csv(), profiles.utilization.to_csv()],
        **extra,
    })


def _out_dir(args):
    return args.out or Config.OUTPUT_DIR


def cmd_predict(args):
    model, parallel, platform, profiles, options = _load_inputs(args)
    prediction = predict(model, parallel, platform, profiles, options=options, strict=args.strict_mapping)
    digest = _digest(args, model, parallel, platform, profiles, options)
    artifacts = reporting.predict_artifacts(prediction, model, parallel, platform, profiles.label,
                                            dump_config(model, parallel, platform), digest)
    artifacts.write(_out_dir(args))
    print(f"{describe(model, parallel, platform, prediction.derived)}: "
          f"t_iter={prediction.breakdown.t_iter:.6g}s")
    return 0


def cmd_heatmap(args):
    model, parallel, platform, profiles, options = _load_inputs(args)
    derived = validate(model, parallel, platform)
    mapping = map_ranks(parallel, platform, strict=args.strict_mapping)
    matrix = build_traffic_matrix(model, parallel, derived, mapping, recompute=options.recompute,
                                  k_active=options.k_active)
    digest = _digest(args, model, parallel, platform, profiles, options)
    alltoall = (model, parallel.ep, options.k_active) if model.is_moe and parallel.ep > 1 else None
    reporting.heatmap_artifacts(matrix, digest, mapping=mapping, alltoall=alltoall).write(_out_dir(args))
    shares = ', '.join(f"{name}={matrix.share(name):.4%}" for name in matrix.totals())
    print(f"{mapping.world_size} ranks, {matrix.total()} bytes: {shares}")
    return 0


def cmd_timeline(args):
    model, parallel, platform, profiles, options = _load_inputs(args)
    prediction = predict(model, parallel, platform, profiles, options=options, strict=args.strict_mapping)
    timeline = timeline_from_breakdown(prediction.breakdown, prediction.derived, recompute=options.recompute)
    digest = _digest(args, model, parallel, platform, profiles, options)
    reporting.timeline_artifacts(timeline, digest).write(_out_dir(args))
    print(f"{timeline.blocks} blocks, on-time {timeline.on_time():.6g}s")
    return 0


def cmd_sim(args):
    model, parallel, platform, profiles, options = _load_inputs(args)
    if args.uniform:
        derived = validate(model, parallel, platform)
        v = parallel.interleave
        sim = SimInput(p=parallel.pp, m=derived.micro_batches, v=v, fwd=1.0 / v,
                       bwd=Config.BWD_FWD_RATIO / v)
    else:
        prediction = predict(model, parallel, platform, profiles, options=options, strict=args.strict_mapping)
        sim = sim_input_from_breakdown(prediction.breakdown, parallel, prediction.derived,
                                       recompute=options.recompute)
    result = simulate(sim)
    digest = _digest(args, model, parallel, platform, profiles, options, uniform=args.uniform)
    reporting.sim_artifacts(result, sim, chrome_trace_json(result, digest), digest).write(_out_dir(args))
    print(f"iteration_time={result.iteration_time:.6g}s bubble_ratio={result.bubble_ratio:.6g} "
          f"normalized_bubble_ratio={result.normalized_bubble_ratio:.6g}")
    return 0


def _tune_request(args, model, parallel, platform, profiles, options, **fields):
    return TuneRequest(model=model, platform=platform, profiles=profiles, parallel=parallel,
                       micro_batches=args.micro_batches, options=options, strict=args.strict_mapping,
                       workers=args.workers, **fields)


def _finish_tune(args, report, model, parallel, platform, profiles, options, **extra):
    report.digest = _digest(args, model, parallel, platform, profiles, options,
                            micro_batches=args.micro_batches, **extra)
    reporting.tune_artifacts(report, args.format).write(_out_dir(args))
    best = report.best.parallel
    print(f"best {best.label()} t_iter={report.best.t_iter:.6g}s "
          f"({len(report.ranked)} ranked, {len(report.exclusions)} excluded)")
    return 0


def cmd_tune_microbatch(args):
    model, parallel, platform, profiles, options = _load_inputs(args)
    report = tune_micro_batch(_tune_request(args, model, parallel, platform, profiles, options))
    return _finish_tune(args, report, model, parallel, platform, profiles, options)


def cmd_tune_parallelism(args):
    model, parallel, platform, profiles, options = _load_inputs(args)
    report = tune_parallelism(_tune_request(args, model, parallel, platform, profiles, options))
    return _finish_tune(args, report, model, parallel, platform, profiles, options)


def cmd_scale_analysis(args):
    model, parallel, platform, profiles, options = _load_inputs(args)
    fields = dict(dp_range=args.dp_range, token_budget=args.token_budget, rent_rate=args.rent_rate,
                  gpu_price=args.gpu_price, cross_product=args.cross_product)
    report = scale_analysis(_tune_request(args, model, parallel, platform, profiles, options, **fields))
    return _finish_tune(args, report, model, parallel, platform, profiles, options, **fields)


def cmd_ingest_profile(args):
    if not args.profile and not args.nccl_log:
        raise InvalidSpec("ingest-profile needs --profile or --nccl-log inputs")
    merged = load_profiles(args.profile, locality=args.locality, topology=args.topology)
    texts = [_read_text(path) for path in args.profile]
    for path in args.nccl_log:
        if not args.op or not args.locality:
            raise InvalidSpec("--nccl-log needs --op and --locality")
        text = _read_text(path)
        texts.append(text)
        bandwidth = ingest_nccl_log(text, args.op, args.locality, topology=args.topology, nranks=args.nranks)
        merged = replace(merged, bandwidth=merged.bandwidth.merged_with(bandwidth))
    digest = input_digest({'command': args.command, 'inputs': texts, 'locality': args.locality,
                           'topology': args.topology, 'op': args.op, 'nranks': args.nranks})
    store = ProfileStore(args.out or os.path.join(Config.OUTPUT_DIR, 'profiles'))
    store.save(merged, digest)
    stats = store.get_stats()
    print(f"{stats['bandwidth_records']} bandwidth records, {stats['utilization_samples']} utilization samples "
          f"in {store.directory}")
    return 0


def cmd_show_defaults(args):
    profiles = default_profiles()
    print("=" * 60)
    print(DEFAULTS_LABEL)
    print("=" * 60)
    summary = profiles.bandwidth.summary()
    print(f"bandwidth: {summary['records']} records in {summary['curves']} curves")
    print(profiles.bandwidth.frame.to_string(index=False))
    print()
    print(profiles.utilization.frame.to_string(index=False))
    print()
    for name in ('BYTES_PER_PARAM', 'ACT_LINEAR_COEF', 'ACT_ATTN_COEF', 'RECOMPUTE', 'DP_OVERLAP', 'DP_BUCKETS',
                 'K_ACTIVE', 'STRICT_MAPPING', 'PP_SCATTER_GATHER', 'BWD_FWD_RATIO', 'PARALLEL_WORKERS',
                 'TIE_DIGITS', 'RENT_RATE', 'GPU_PRICE'):
        print(f"{name:<20} {getattr(Config, name)}")
    return 0


COMMANDS = {
    'predict': cmd_predict,
    'heatmap': cmd_heatmap,
    'timeline': cmd_timeline,
    'sim': cmd_sim,
    'tune-microbatch': cmd_tune_microbatch,
    'tune-parallelism': cmd_tune_parallelism,
    'scale-analysis': cmd_scale_analysis,
    'ingest-profile': cmd_ingest_profile,
    'show-defaults': cmd_show_defaults,
}


def main(argv=None):
    """
    Run one command

    Returns:
        0 on success, 1 on a domain error, 2 on a usage error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    setup_logging(args.log_level)
    if args.command not in COMMANDS_WITHOUT_CONFIG and not args.config:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: --config is required for {args.command}", file=sys.stderr)
        return 2
    try:
        status = COMMANDS[args.command](args)
    except TunerError as e:
        print(f"error: {e}", file=sys.stderr)
        log_action('command_failed', f"{args.command}: {e.code}")
        return 1
    log_action('command', args.command)
    return status
