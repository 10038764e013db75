#!/usr/bin/env python3
"""
Stress-testing command line
Validate networks, train model bundles, simulate output distributions, run
stress scenarios and render their reports.

Exit codes: 0 success, 1 domain error, 2 I/O or usage error.
"""

import os
import sys
import json
import time
import hashlib
import argparse
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

# Color support
try:
    from colorama import init, Fore, Style
    init(autoreset=True)
    COLOR_AVAILABLE = True
except ImportError:
    class MockColor:
        def __getattr__(self, name):
            return ''

    Fore = MockColor()
    Style = MockColor()
    COLOR_AVAILABLE = False

from errors import BNStressError, DataError, GraphError
from models import TrainConfig, save_model
from bn_graph import (
    __version__, Dag, SampleBatch, validate, load_network, save_network, describe,
)
from pipeline import train_network, fit_feature_nodes, predictions, node_spec
from simulate import run_simulation, write_simulation_csvs
from stress import StressSettings, scenario_from_json, run_scenario, rank_models
from stress_config import StressConfig
import banksim_data

logger = logging.getLogger(__name__)

COLORS = {
    'header': Fore.CYAN + Style.BRIGHT,
    'success': Fore.GREEN + Style.BRIGHT,
    'warning': Fore.YELLOW + Style.BRIGHT,
    'error': Fore.RED + Style.BRIGHT,
    'label': Fore.MAGENTA,
    'data': Fore.GREEN,
    'reset': Style.RESET_ALL,
}

REPORT_COLUMNS = ['scenario', 'kl', 'delta_auc', 'delta_recall', 'median_shift']


def colorize(text: str, color_type: str) -> str:
    return f"{COLORS.get(color_type, '')}{text}{COLORS['reset']}"


def disable_colors() -> None:
    for key in COLORS:
        COLORS[key] = ''


def setup_logging(level: str, log_file: Optional[str] = None) -> None:
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                        handlers=handlers, force=True)


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


def write_json(data: Dict, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def read_json(path: str):
    with open(path) as f:
        return json.load(f)


def build_manifest(command: str, args: argparse.Namespace, config: StressConfig, started: float) -> Dict:
    arguments = {k: v for k, v in sorted(vars(args).items()) if k not in ('func', 'command')}
    return {
        'command': command,
        'arguments': arguments,
        'config': config.to_dict(),
        'seed': getattr(args, 'seed', None),
        'version': __version__,
        'duration_seconds': round(time.time() - started, 3),
    }


# Model bundles

@dataclass
class Bundle:
    """A trained network together with the data it was trained on"""
    directory: str
    dag: Dag
    meta: Dict
    train: SampleBatch
    eval: Optional[SampleBatch] = None
    rows: Optional[Dict[str, np.ndarray]] = None


def save_bundle(bundle: Bundle) -> None:
    """network.json with models by reference, models/, features/, meta.json and the data CSVs"""
    directory = bundle.directory
    os.makedirs(os.path.join(directory, 'models'), exist_ok=True)
    os.makedirs(os.path.join(directory, 'features'), exist_ok=True)
    refs = {}
    for node in bundle.dag.model_nodes:
        refs[node.id] = f"models/{node.id}.json"
        save_model(node.model, os.path.join(directory, refs[node.id]))
    for node in bundle.dag.feature_nodes:
        write_json(node.dist.to_json(), os.path.join(directory, 'features', f"{node.id}.json"))
    save_network(bundle.dag, os.path.join(directory, 'network.json'), refs)
    train_path = os.path.join(directory, 'train.csv')
    bundle.train.to_frame().to_csv(train_path, index=False)
    meta = dict(bundle.meta, train_sha256=file_sha256(train_path))
    if bundle.eval is not None:
        bundle.eval.to_frame().to_csv(os.path.join(directory, 'eval.csv'), index=False)
    if bundle.rows:
        meta['rows'] = {k: [int(i) for i in v] for k, v in sorted(bundle.rows.items())}
    write_json(meta, os.path.join(directory, 'meta.json'))
    bundle.meta = meta


def load_bundle(directory: str) -> Bundle:
    """Load and check a bundle: valid network, every model trained, training data unchanged"""
    meta = read_json(os.path.join(directory, 'meta.json'))
    dag = load_network(os.path.join(directory, 'network.json'))
    result = validate(dag)
    if not result.ok:
        raise GraphError("bundle network is invalid: " + "; ".join(result.messages()))
    untrained = [n.id for n in dag.model_nodes if n.model is None]
    if untrained:
        raise GraphError(f"bundle has untrained models: {', '.join(untrained)}")
    train_path = os.path.join(directory, 'train.csv')
    if meta.get('train_sha256') and file_sha256(train_path) != meta['train_sha256']:
        raise DataError(f"{train_path} does not match the fingerprint recorded in meta.json")
    train = SampleBatch.from_frame(pd.read_csv(train_path))
    eval_path = os.path.join(directory, 'eval.csv')
    evaluation = SampleBatch.from_frame(pd.read_csv(eval_path)) if os.path.exists(eval_path) else None
    rows = {k: np.asarray(v, dtype=np.int64) for k, v in meta.get('rows', {}).items()} or None
    return Bundle(directory, dag, meta, train, evaluation, rows)


# Commands

def format_violation(violation) -> str:
    if violation.message.startswith(f"{violation.rule}:"):
        return violation.message
    return f"{violation.rule}: {violation.message}"


def cmd_validate(args: argparse.Namespace, config: StressConfig) -> int:
    dag = load_network(args.network)
    result = validate(dag)
    if not result.ok:
        for violation in result.violations:
            print(format_violation(violation))
        return 1
    print(colorize("Network is valid", 'success'))
    print(describe(dag))
    return 0


def parse_architectures(values: Optional[List[str]]) -> Dict[str, str]:
    architectures = {}
    for value in values or ():
        node_id, sep, architecture = value.partition('=')
        if not sep or not node_id or architecture not in ('linear', 'mlp', 'stumps'):
            raise ValueError(f"--arch expects NODE=linear|mlp|stumps, got {value!r}")
        architectures[node_id] = architecture
    return architectures


def apply_model_prior_weight(dag: Dag, weight: float) -> Dag:
    """Give every model node that carries a class prior the configured mixing weight"""
    if weight <= 0:
        return dag
    for node in dag.model_nodes:
        if node.prior is not None and not node.prior_weight:
            dag = dag.replace_node(replace(node, prior_weight=weight))
    return dag


def _load_columns(args: argparse.Namespace):
    if not args.network:
        raise ValueError("--network is required with --data-format columns")
    dag = load_network(args.network)
    result = validate(dag)
    if not result.ok:
        raise GraphError("network is invalid: " + "; ".join(result.messages()))
    train = SampleBatch.from_frame(pd.read_csv(args.data))
    evaluation = SampleBatch.from_frame(pd.read_csv(args.eval)) if args.eval else None
    return fit_feature_nodes(dag, train), train, evaluation, None


def _load_banksim(args: argparse.Namespace, config: StressConfig):
    split = banksim_data.prepare(banksim_data.load_csv(args.data), args.seed, config.thresholds,
                                 args.eval_fraction)
    dag = banksim_data.banksim_network(split.dists, args.architecture)
    return (dag, banksim_data.to_sample_batch(split.train), banksim_data.to_sample_batch(split.eval),
            {'y': split.balanced_train_rows})


def cmd_train(args: argparse.Namespace, config: StressConfig) -> int:
    if args.data_format == 'banksim':
        dag, train, evaluation, rows = _load_banksim(args, config)
    else:
        dag, train, evaluation, rows = _load_columns(args)
    for node_id, architecture in parse_architectures(args.arch).items():
        if not dag.has(node_id) or not dag.node(node_id).is_model:
            raise GraphError(f"--arch names {node_id}, which is not a model node")
        dag = dag.replace_node(replace(dag.node(node_id), model_spec=node_spec(dag, node_id, architecture)))
    use_gold = args.use_gold or config.gold_labels
    train_config = TrainConfig(epochs=config.epochs, full_batch_rows=config.full_batch_rows)
    dag = train_network(dag, train, args.seed, train_config, use_gold, rows,
                        learning_rates={'linear': config.lr_linear, 'mlp': config.lr_mlp})
    dag = apply_model_prior_weight(dag, config.model_prior_lambda)

    predicted = predictions(dag, train)
    accuracies = {node.id: float(np.mean(predicted[node.id] == np.asarray(train[node.id])))
                  for node in dag.model_nodes}
    meta = {
        'version': __version__,
        'seed': args.seed,
        'data_format': args.data_format,
        'data_sha256': file_sha256(args.data),
        'use_gold': use_gold,
        'config': config.to_dict(),
        'train_accuracy': accuracies,
    }
    save_bundle(Bundle(args.out, dag, meta, train, evaluation, rows))

    print(colorize(f"Trained bundle written to {args.out}", 'success'))
    for node in dag.model_nodes:
        spec = node.spec
        print(f"  {colorize(node.id, 'label')} {spec.architecture:7s} "
              f"train accuracy {colorize(f'{accuracies[node.id]:.4f}', 'data')}")
    return 0


def _settings(args: argparse.Namespace, config: StressConfig, bundle: Bundle) -> StressSettings:
    return StressSettings(
        reps=args.reps or config.default_reps,
        samples=config.default_samples if args.samples is None else args.samples,
        bins=args.bins or config.default_bins,
        seed=args.seed,
        workers=args.workers or config.workers,
        positive_class=args.positive_class,
        propagation=args.propagation,
        ablation_propagation=getattr(args, 'ablation_propagation', 'argmax'),
        kl_smoothing=config.kl_smoothing,
        use_gold=bool(bundle.meta.get('use_gold', False)),
    )


def _forward(kind: str, summaries: List[Dict], manifest: Dict) -> None:
    try:
        from splunk_logger import forward_reports
    except ImportError:
        logger.warning("Splunk integration not available. Install with: pip install splunk-sdk")
        return
    sent = forward_reports(kind, summaries, manifest)
    if sent == len(summaries):
        print(colorize(f"{sent} summary row(s) forwarded to Splunk", 'success'))
    else:
        print(colorize(f"Splunk accepted {sent} of {len(summaries)} summary rows; see log", 'warning'))


def cmd_simulate(args: argparse.Namespace, config: StressConfig) -> int:
    started = time.time()
    bundle = load_bundle(args.bundle)
    settings = _settings(args, config, bundle)
    result = run_simulation(bundle.dag, settings.reps, settings.samples, settings.bins, settings.seed,
                            settings.workers, settings.positive_class, settings.propagation)
    manifest = build_manifest('simulate', args, config, started)
    write_json({'kind': 'simulation', 'manifest': manifest, 'simulation': result.to_json()}, args.out)
    if args.csv_dir:
        write_simulation_csvs(result, args.csv_dir, 'baseline', per_rep=True)
    summary = {'reps': result.reps, 'pooled_median': result.pooled_median,
               'mean_frequencies': result.mean_frequencies.tolist()}
    print(colorize(f"Simulation report written to {args.out}", 'success'))
    print(f"  pooled median {colorize(f'{result.pooled_median:.4f}', 'data')} over {result.reps} reps")
    if args.splunk:
        _forward('simulation', [summary], manifest)
    return 0


def cmd_stress(args: argparse.Namespace, config: StressConfig) -> int:
    started = time.time()
    if not args.scenario and not args.rank_ablations:
        raise ValueError("stress needs --scenario, --rank-ablations or both")
    bundle = load_bundle(args.bundle)
    settings = _settings(args, config, bundle)
    evaluation = SampleBatch.from_frame(pd.read_csv(args.eval)) if args.eval else bundle.eval
    output: Dict = {'kind': 'stress'}
    rows = []
    if args.scenario:
        scenario = scenario_from_json(read_json(args.scenario),
                                      base_dir=os.path.dirname(os.path.abspath(args.scenario)))
        report = run_scenario(bundle.dag, scenario, settings, bundle.train, evaluation, bundle.rows)
        output['report'] = report.to_json()
        rows.append(report.summary())
    if args.rank_ablations:
        if evaluation is None:
            raise DataError("ranking ablations needs evaluation data (--eval or a bundle eval.csv)")
        ranked = rank_models(bundle.dag, bundle.train, evaluation, settings, bundle.rows)
        output['ranking'] = [dict(r.summary(), node=node_id, rank=i + 1)
                             for i, (node_id, r) in enumerate(ranked)]
        rows.extend(output['ranking'])
    output['manifest'] = build_manifest('stress', args, config, started)
    write_json(output, args.out)

    print(colorize(f"Stress report written to {args.out}", 'success'))
    for row in rows:
        print(f"  {colorize(row['scenario'], 'label')} KL {colorize(str(row['kl']), 'data')} "
              f"delta AUC {row['delta_auc']}")
    if args.splunk:
        _forward('stress', rows, output['manifest'])
    return 0


# Report rendering

def _cell(value) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def report_frame(report: Dict) -> pd.DataFrame:
    """Tabular view of a stress or simulation report"""
    kind = report.get('kind')
    if kind == 'stress':
        rows = []
        if 'report' in report:
            rows.append(report['report']['summary'])
        rows.extend(report.get('ranking', []))
        return pd.DataFrame([{c: r.get(c) for c in REPORT_COLUMNS} for r in rows], columns=REPORT_COLUMNS)
    if kind == 'simulation':
        simulation = report['simulation']
        records = []
        for rep, (hist, median) in enumerate(zip(simulation['histograms'], simulation['medians'])):
            counts = np.asarray(hist['counts'], dtype=float)
            total = counts.sum()
            row = {'rep': rep, 'median': median}
            for b, count in enumerate(counts):
                row[f"bin_{b}"] = count / total if total else 0.0
            records.append(row)
        return pd.DataFrame(records)
    raise DataError(f"unknown report kind {kind!r}")


def render_markdown(frame: pd.DataFrame) -> str:
    header = "| " + " | ".join(frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    body = ["| " + " | ".join(_cell(v) for v in row) + " |"
            for row in frame.astype(object).itertuples(index=False)]
    return "\n".join([header, rule] + body) + "\n"


def render_report(report: Dict, fmt: str) -> str:
    frame = report_frame(report)
    if fmt == 'csv':
        return frame.to_csv(index=False)
    return render_markdown(frame)


def cmd_report(args: argparse.Namespace, config: StressConfig) -> int:
    with open(args.input) as f:
        report = json.load(f)
    text = render_report(report, args.format)
    if args.out:
        with open(args.out, 'w') as f:
            f.write(text)
        print(colorize(f"Report written to {args.out}", 'success'))
    else:
        sys.stdout.write(text)
    return 0


def create_argument_parser():
    """Create command-line argument parser"""
    parser = argparse.ArgumentParser(
        description='Stress-test hierarchies of classifiers modeled as a Bayesian network',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python3 stress_cli.py validate --network toy.json
  python3 stress_cli.py train --network toy.json --data train.csv --eval eval.csv --out bundle --seed 1
  python3 stress_cli.py train --data-format banksim --data bs140513.csv --out banksim --seed 1
  python3 stress_cli.py simulate --bundle bundle --reps 100 --samples 5000 --seed 7 --out sim.json
  python3 stress_cli.py stress --bundle bundle --scenario shift_x3.json --seed 7 --out shift.json
  python3 stress_cli.py stress --bundle banksim --rank-ablations --seed 7 --out ranking.json
  python3 stress_cli.py report --in shift.json --format md

Configuration (environment, overridable with --config FILE.json):
  export BNSTRESS_WORKERS=4
  export BNSTRESS_GOLD_LABELS=true
        """
    )
    parser.add_argument('--no-color', action='store_true', help='Disable colored output')
    parser.add_argument('--log-file', help='Also write log records to this file')
    parser.add_argument('--log-level', help='Override BNSTRESS_LOG_LEVEL')
    parser.add_argument('--config', help='JSON file overriding configuration keys')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('validate', help='Check a network file')
    p.add_argument('--network', required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser('train', help='Fit features, train models bottom-up and write a bundle')
    p.add_argument('--network', help='Network JSON (columns format)')
    p.add_argument('--data', required=True, help='Training CSV')
    p.add_argument('--eval', help='Evaluation CSV copied into the bundle (columns format)')
    p.add_argument('--out', required=True, help='Bundle directory')
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--data-format', choices=('columns', 'banksim'), default='columns')
    p.add_argument('--architecture', choices=('linear', 'mlp', 'stumps'), default='linear',
                   help='Architecture of every BankSim model')
    p.add_argument('--arch', action='append', metavar='NODE=ARCH', help='Per-node architecture override')
    p.add_argument('--eval-fraction', type=float, default=0.3, help='BankSim customers held out')
    p.add_argument('--use-gold', action='store_true', help='Train upper models on gold parent labels')
    p.set_defaults(func=cmd_train)

    for name, helptext, func in (('simulate', 'Sample the output distribution', cmd_simulate),
                                 ('stress', 'Compare a scenario against the baseline', cmd_stress)):
        p = sub.add_parser(name, help=helptext)
        p.add_argument('--bundle', required=True)
        p.add_argument('--out', required=True, help='Report JSON')
        p.add_argument('--seed', type=int, required=True)
        p.add_argument('--reps', type=int)
        p.add_argument('--samples', type=int)
        p.add_argument('--bins', type=int)
        p.add_argument('--workers', type=int)
        p.add_argument('--positive-class', type=int, default=1)
        p.add_argument('--propagation', choices=('sample', 'argmax'), default='sample',
                       help='Sample model classes or take the argmax; a scenario file may set its own')
        p.add_argument('--splunk', '-s', action='store_true', help='Forward the summary rows to Splunk')
        p.set_defaults(func=func)
        if name == 'simulate':
            p.add_argument('--csv-dir', help='Also write histogram CSVs here')
        else:
            p.add_argument('--scenario', help='Scenario JSON')
            p.add_argument('--ablation-propagation', choices=('sample', 'argmax'), default='argmax',
                           help='Propagation used by ablations and the ablation ranking')
            p.add_argument('--eval', help='Labeled evaluation CSV (default: bundle eval.csv)')
            p.add_argument('--rank-ablations', action='store_true',
                           help='Ablate every non-output model and rank by |delta AUC|')

    p = sub.add_parser('report', help='Render a report as a table')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--format', choices=('md', 'csv'), default='md')
    p.add_argument('--out')
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = create_argument_parser().parse_args(argv)
    if args.no_color:
        disable_colors()
    try:
        config = StressConfig.from_file(args.config) if args.config else StressConfig()
        setup_logging(args.log_level or config.log_level, args.log_file)
        logger.debug(f"Configuration: {config.get_summary()}")
        return args.func(args, config)
    except BNStressError as e:
        print(colorize(f"error: {e}", 'error'), file=sys.stderr)
        return 1
    except json.JSONDecodeError as e:
        offset = len(e.doc[:e.pos].encode('utf-8'))
        print(colorize(f"error: malformed JSON at byte {offset}: {e.msg}", 'error'), file=sys.stderr)
        return 2
    except OSError as e:
        print(colorize(f"error: {e}", 'error'), file=sys.stderr)
        return 2
    except ValueError as e:
        print(colorize(f"error: {e}", 'error'), file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print(colorize("Interrupted by user.", 'warning'), file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
