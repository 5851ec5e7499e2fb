import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click

from etcseg.autodiff.serialization import atomic_write_bytes, load_tensor, save_tensor
from etcseg.config import TrainConfig, load_train_config
from etcseg.errors import ConfigError, DimensionError
from etcseg.middleware.error_handler import cli_middleware
from etcseg.services.data_service import GeneratorParams, directory_checksum, generate_dataset
from etcseg.services.fusion_service import fuse_evidence_arrays
from etcseg.services.model_service import TriBranchNet
from etcseg.services.trainer_service import (
    FINAL_WEIGHTS_FILE,
    RESOLVED_CONFIG_FILE,
    evaluate_all,
    load_split,
    run_training,
    write_resolved_config,
)
from etcseg.services.uncertainty_service import export_uncertainty

logger = logging.getLogger(__name__)

# Extra `--key value` tokens become TrainConfig overrides
OVERRIDABLE = {'ignore_unknown_options': True, 'allow_extra_args': True}


def config_epilog() -> str:
    # \b keeps click from rewrapping the key list
    lines = ["Config keys (set in --config JSON or override with --key value):"]
    return '\b\n' + '\n'.join(lines + [f"  {line}" for line in TrainConfig.help_lines()])


def parse_overrides(tokens: Sequence[str]) -> Dict[str, Any]:
    """['--iterations', '5', '--seed=3'] -> {'iterations': '5', 'seed': '3'}"""
    overrides: Dict[str, Any] = {}
    tokens = list(tokens)
    position = 0
    while position < len(tokens):
        token = tokens[position]
        if not token.startswith('--') or token == '--':
            raise ConfigError(f"unexpected argument {token!r}; overrides take the form --key value", {'key': token})
        key = token[2:]
        if '=' in key:
            key, value = key.split('=', 1)
            position += 1
        else:
            if position + 1 >= len(tokens):
                raise ConfigError(f"override --{key} is missing a value", {'key': key.replace('-', '_')})
            value = tokens[position + 1]
            position += 2
        overrides[key.replace('-', '_')] = value
    return overrides


def resolve_config(ctx: click.Context, config_path: Optional[str], extra: Optional[Dict[str, Any]] = None) -> TrainConfig:
    overrides = parse_overrides(ctx.args)
    overrides.update(extra or {})
    profile = ctx.obj.get('profile') if ctx.obj else None
    return load_train_config(config_path, overrides, profile)


def echo_json(payload: Dict[str, Any]):
    click.echo(json.dumps(payload, indent=2, sort_keys=True, default=str))


def write_record(path: Path, payload: Dict[str, Any]):
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, json.dumps(payload, indent=2, sort_keys=True, default=str).encode('utf-8'))


config_option = click.option('--config', 'config_path', default=None, help='JSON file of TrainConfig keys.')


@click.command('generate-data', context_settings=OVERRIDABLE, epilog=config_epilog())
@config_option
@click.option('--out', default=None, help='Dataset directory (default: dataset_path).')
@click.pass_context
@cli_middleware.handle_cli_errors
@cli_middleware.log_invocation
def generate_data(ctx, config_path, out):
    """Generate the synthetic segmentation dataset (train/ and test/)."""
    extra = {'dataset_path': out} if out else None
    config = resolve_config(ctx, config_path, extra)
    params = GeneratorParams(height=config.height, width=config.width, num_classes=config.num_classes,
                             noise_sigma=config.noise_sigma, blur_radius=config.blur_radius)
    root = generate_dataset(config.dataset_path, config.seed, config.n_samples, params, n_test=config.n_test)
    write_resolved_config(config, root)
    echo_json({'dataset': str(root), 'n_train': config.n_samples, 'n_test': config.n_test,
               'checksum': directory_checksum(root)})


@click.command('train', context_settings=OVERRIDABLE, epilog=config_epilog())
@config_option
@click.option('--out', default=None, help='Run directory (default: output_dir).')
@click.pass_context
@cli_middleware.handle_cli_errors
@cli_middleware.log_invocation
def train(ctx, config_path, out):
    """Train the tri-branch network; writes histories, checkpoints and final weights."""
    extra = {'output_dir': out} if out else None
    config = resolve_config(ctx, config_path, extra)
    result = run_training(config)
    summary = {'output_dir': str(result.output_dir), 'iterations': result.iterations,
               'conflict_overflow': result.conflict_overflow}
    if result.final_report is not None:
        summary['ensemble_dsc'] = result.final_report.mean_dsc('ensemble')
    echo_json(summary)


@click.command('eval', context_settings=OVERRIDABLE, epilog=config_epilog())
@config_option
@click.option('--weights', default=None, help='Weight file (default: <output_dir>/final_weights.etcw).')
@click.option('--split', 'split_name', default='test', show_default=True, help='Dataset split to score.')
@click.option('--out', default=None, help='Directory for report.json (default: output_dir).')
@click.pass_context
@cli_middleware.handle_cli_errors
@cli_middleware.log_invocation
def evaluate(ctx, config_path, weights, split_name, out):
    """Score every branch and the ensemble; writes report.json and uncertainty.json."""
    config = resolve_config(ctx, config_path)
    weights = Path(weights) if weights else Path(config.output_dir) / FINAL_WEIGHTS_FILE
    if not weights.is_file():
        raise ConfigError(f"weights not found: {weights}", {'path': str(weights)})
    net = TriBranchNet.load(weights)
    dataset = load_split(config.dataset_path, split_name, net.num_classes)
    if dataset is None:
        raise ConfigError(f"dataset split not found: {Path(config.dataset_path) / split_name}",
                          {'path': str(Path(config.dataset_path) / split_name)})
    report, uncertainty = evaluate_all(net, dataset)
    out_dir = Path(out) if out else Path(config.output_dir)
    write_record(out_dir / 'report.json', report.to_dict())
    write_record(out_dir / 'uncertainty.json', uncertainty)
    write_resolved_config(config, out_dir)
    echo_json({'report': str(out_dir / 'report.json'),
               'mean_dsc': {branch: report.mean_dsc(branch) for branch in report.branches}})


def _evidence_file(path: str) -> Any:
    evidence = load_tensor(path)
    if evidence.ndim != 3:
        raise DimensionError(f"{path}: evidence must be (K, H, W), got shape {evidence.shape}")
    return evidence


@click.command('fuse')
@click.option('--a', 'evidence_a', required=True, help='ETNS evidence (K, H, W) of the first branch.')
@click.option('--b', 'evidence_b', required=True, help='ETNS evidence (K, H, W) of the second branch.')
@click.option('--out', required=True, help='Output ETNS file of fused probabilities (K, H, W).')
@click.pass_context
@cli_middleware.handle_cli_errors
@cli_middleware.log_invocation
def fuse(ctx, evidence_a, evidence_b, out):
    """Dempster-Shafer fusion of two evidence maps into expected probabilities."""
    fused = fuse_evidence_arrays(_evidence_file(evidence_a), _evidence_file(evidence_b))
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(out_path, fused.prob_fuse)
    write_record(out_path.parent / RESOLVED_CONFIG_FILE,
                 {'command': 'fuse', 'a': evidence_a, 'b': evidence_b, 'out': out,
                  'conflict_overflow': fused.conflict_overflow})
    echo_json({'out': str(out_path), 'conflict_overflow': fused.conflict_overflow,
               'max_conflict': float(fused.conflict.max())})


@click.command('uncertainty-map')
@click.option('--weights', required=True, help='Weight file (.etcw).')
@click.option('--sample', required=True, help='ETNS image (1, H, W), e.g. test/img_00000.etns.')
@click.option('--out', required=True, help='Directory for u_ecb.pgm, u_epb.pgm and u_efb.pgm.')
@click.pass_context
@cli_middleware.handle_cli_errors
@cli_middleware.log_invocation
def uncertainty_map(ctx, weights, sample, out):
    """Export per-branch uncertainty maps as 8-bit PGM images."""
    written = export_uncertainty(weights, sample, out)
    write_record(Path(out) / RESOLVED_CONFIG_FILE,
                 {'command': 'uncertainty-map', 'weights': weights, 'sample': sample, 'out': out})
    echo_json({branch: str(path) for branch, path in written.items()})


COMMANDS: List[click.Command] = [generate_data, train, evaluate, fuse, uncertainty_map]


def register_routes(group: click.Group):
    for command in COMMANDS:
        group.add_command(command)
