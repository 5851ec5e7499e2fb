"""
Multi-seed experiment driver for the tri-branch segmentation method.

Runs ETC against the supervised-only baseline on the synthetic dataset, and
optionally the labeled-ratio sweep, the loss ablations and a determinism
re-run. Summaries land next to the run directories in output_dir.
"""
import json
import logging
import sys

import click

from etcseg.config import Config, load_train_config
from etcseg.errors import EtcError, InternalError
from etcseg.middleware.error_handler import emit_error
from etcseg.services.data_service import GeneratorParams, generate_dataset
from etcseg.services.experiment_service import (
    ABLATIONS,
    ablation_study,
    check_determinism,
    compare_with_baseline,
    labeled_fraction_study,
)
from etcseg.services.trainer_service import load_split

logger = logging.getLogger(__name__)


def ensure_dataset(config):
    if load_split(config.dataset_path, 'train', config.num_classes) is not None:
        return
    logger.info(f"No dataset at {config.dataset_path}; generating it")
    params = GeneratorParams(height=config.height, width=config.width, num_classes=config.num_classes,
                             noise_sigma=config.noise_sigma, blur_radius=config.blur_radius)
    generate_dataset(config.dataset_path, config.seed, config.n_samples, params, n_test=config.n_test)


@click.command()
@click.option('--config', 'config_path', default=None, help='JSON file of TrainConfig keys.')
@click.option('--seeds', default='1,2,3', show_default=True, help='Comma-separated training seeds.')
@click.option('--fractions', default=None, help='Comma-separated labeled fractions for the ratio sweep.')
@click.option('--ablations', is_flag=True, help='Also run the loss-component ablations.')
@click.option('--determinism', is_flag=True, help='Re-run the first seed and compare loss CSVs.')
@click.option('--out', default=None, help='Root directory for all runs (default: output_dir).')
def main(config_path, seeds, fractions, ablations, determinism, out):
    """Run the comparison study and print the verdicts"""
    logging.basicConfig(level=getattr(logging, Config.LOG_LEVEL, logging.INFO), stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        overrides = {'output_dir': out} if out else {}
        config = load_train_config(config_path, overrides)
        seed_list = [int(s) for s in seeds.split(',') if s.strip()]
        ensure_dataset(config)

        results = {'comparison': compare_with_baseline(config, seed_list)}
        if fractions:
            fraction_list = [float(f) for f in fractions.split(',') if f.strip()]
            results['labeled_fraction'] = labeled_fraction_study(config, fraction_list, seed_list)
        if ablations:
            results['ablation'] = ablation_study(config, seed_list, list(ABLATIONS))
        if determinism:
            results['determinism'] = check_determinism(config, seed_list[0])
    except EtcError as exc:
        emit_error(exc.to_dict())
        sys.exit(exc.exit_code)
    except KeyboardInterrupt:
        logger.warning("Interrupted; completed runs can be resumed from their checkpoints")
        sys.exit(1)
    except Exception as exc:
        logger.exception("Experiment driver failed unexpectedly")
        error = InternalError(f"{type(exc).__name__}: {exc}", {'exception': type(exc).__name__})
        emit_error(error.to_dict())
        sys.exit(error.exit_code)

    click.echo(json.dumps({'verdicts': results['comparison']['verdicts'],
                           'mean_dsc_gain_points': results['comparison']['mean_dsc_gain_points'],
                           'determinism': results.get('determinism')}, indent=2, sort_keys=True))


if __name__ == '__main__':
    main()
