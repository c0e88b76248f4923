"""
Command line for Fair Translate
Subcommands for data synthesis, PAC and translator training, translation, evaluation,
augmentation and the fair classification experiment
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from src.config_schema import RunConfig, SyntheticSpec, deep_merge, load_run_config, save_run_config
from src.data import AnnotatedDataset, load_annotated_dataset, write_dataset
from src.errors import CheckpointError, ConfigError, DataFormatError, FairTranslateError
from src.evaluation import evaluate_translations, synthetic_attribute_classifier, translate_images
from src.fair_classify import (augment_records, fairness_split, load_classifier, run_fair_classification,
                               save_classifier)
from src.image_store import create_comparison_sheet, tile_batch
from src.log_setup import configure_logging, write_history_csv
from src.metrics import PacEmbedder
from src.pac import load_pac, save_pac, train_pac
from src.presets import PresetManager
from src.synthetic import generate_synthetic_dataset
from src.trainer import Trainer, TrainingStatus, load_generator

EXIT_OK = 0
EXIT_INTERRUPTED = 130


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors raised as ConfigError (exit code 1)"""

    def error(self, message):
        raise ConfigError('arguments', message)


def parse_attribute_edits(edits: Sequence[str], attribute_names: Sequence[str]) -> List[Tuple[int, int]]:
    """
    Parse "+name" / "-name" edits into (attribute index, value) pairs

    Args:
        edits: Edit strings; '+' sets the attribute, '-' clears it
        attribute_names: Valid attribute names

    Returns:
        List of (index, value) in the given order
    """
    parsed = []
    for edit in edits:
        if len(edit) < 2 or edit[0] not in '+-':
            raise ConfigError('edit', f"'{edit}' must look like +name or -name")
        name = edit[1:]
        if name not in attribute_names:
            raise ConfigError('edit', f"unknown attribute '{name}', valid names: {', '.join(attribute_names)}")
        parsed.append((list(attribute_names).index(name), 1 if edit[0] == '+' else 0))
    return parsed


def apply_edits(vector, edits: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Copy of an attribute vector with the parsed edits applied in order"""
    result = np.array(vector, dtype=np.int64, copy=True)
    for index, value in edits:
        result[index] = value
    return result


def edit_suffix(edits: Sequence[str]) -> str:
    return '_'.join(edits)


def parse_set_overrides(assignments: Sequence[str]) -> Dict[str, Any]:
    """
    Turn "section.field=value" strings into a nested override dict

    Values are read as JSON when possible ("3", "0.5", "[1, 2]", "true"), else as strings.
    """
    overrides: Dict[str, Any] = {}
    for assignment in assignments:
        key, sep, raw = assignment.partition('=')
        if not sep or not key:
            raise ConfigError('set', f"'{assignment}' must look like section.field=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = value
        for part in reversed(key.split('.')):
            node = {part: node}
        overrides = deep_merge(overrides, node)
    return overrides


def resolve_config(args: argparse.Namespace, command_overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Config file, then presets, then --set overrides, then command flags, then --seed / --device"""
    config = load_run_config(args.config)
    manager = PresetManager(args.preset_dir)
    for name in args.preset or []:
        config = manager.get_preset(name).apply(config)
    if args.set:
        config = config.with_overrides(parse_set_overrides(args.set))
    if command_overrides:
        config = config.with_overrides(command_overrides)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.device:
        config = config.with_overrides({'device': args.device})
    return config


def _prepare_output(args: argparse.Namespace, config: RunConfig) -> Path:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(config, out_dir)
    return out_dir


def _load_records(data_dir: str, config: RunConfig, resolution: int, split: str) -> AnnotatedDataset:
    loader = config.loader.updated(out_size=resolution)
    records = load_annotated_dataset(data_dir, split=split, config=loader,
                                     cardinalities=dict(zip(('gender', 'age', 'race'), config.pac.cardinalities)))
    if not records:
        raise DataFormatError(f"no '{split}' records found in {data_dir}")
    return records


def _synthetic_spec_of(data_dir: str) -> Optional[SyntheticSpec]:
    path = Path(data_dir) / 'synthetic_spec.json'
    if not path.exists():
        return None
    with open(path, 'r', encoding='utf-8') as f:
        return SyntheticSpec.from_dict(json.load(f)['spec'])


def cmd_synth_data(args: argparse.Namespace) -> int:
    overrides = {'data': {}}
    if args.n is not None:
        overrides['data']['num_samples'] = args.n
    if args.correlation is not None:
        overrides['data']['correlation'] = args.correlation
    if args.resolution is not None:
        overrides['data']['resolution'] = args.resolution
    config = resolve_config(args, overrides)
    out_dir = _prepare_output(args, config)

    spec = config.data
    records = generate_synthetic_dataset(spec)
    write_dataset(records, out_dir, spec.attribute_names, provenance=spec.to_dict())
    create_comparison_sheet(tile_batch([r.image for r in records[:16]], columns=8), out_dir / 'preview.png',
                            cell_size=spec.resolution)
    logging.info(f"Wrote {len(records)} synthetic records to {out_dir}")
    return EXIT_OK


def cmd_train_pac(args: argparse.Namespace) -> int:
    overrides = {'pac': {'epochs': args.epochs}} if args.epochs else None
    config = resolve_config(args, overrides)
    out_dir = _prepare_output(args, config)

    records = _load_records(args.data, config, config.pac.resolution, 'train')
    if args.target_data:
        source = list(records)
        target = list(_load_records(args.target_data, config, config.pac.resolution, 'train'))
    else:
        source = [r for r in records if r.domain_label == 0]
        target = [r for r in records if r.domain_label == 1]
    logging.info(f"PAC training on {len(source)} source and {len(target)} target records")

    model, history = train_pac(config.pac, source, target, device=config.device)
    save_pac(model, out_dir / 'pac.ckpt', history)
    write_history_csv(history, out_dir / 'pac_history.csv')
    return EXIT_OK


def cmd_train_gan(args: argparse.Namespace) -> int:
    overrides = {'gan': {'checkpoint_dir': str(Path(args.out) / 'checkpoints')}}
    if args.epochs:
        overrides['gan']['epochs'] = args.epochs
    if args.run_id:
        overrides['gan']['run_id'] = args.run_id
    config = resolve_config(args, overrides)
    out_dir = _prepare_output(args, config)
    weights = config.gan.weights

    pac = None
    if args.pac:
        pac = load_pac(args.pac, config.device)
    elif weights.w_pad > 0 or weights.w_percept > 0:
        raise CheckpointError("train-gan needs --pac PATH (a checkpoint written by train-pac) while "
                              "w_pad or w_percept is non-zero; pass --preset baseline to train without it")

    records = _load_records(args.data, config, config.gan.resolution, 'train')
    trainer = Trainer(config.gan, config.device,
                      progress_callback=lambda b, n, epoch: logging.debug(f"epoch {epoch} batch {b}/{n}"))
    result = trainer.train(records, pac, records.attribute_names, resume=args.resume)
    if result.status == TrainingStatus.STOPPED:
        logging.warning("Training stopped before completion")
    logging.info(f"Translator checkpoints in {result.run_dir} ({out_dir})")
    return EXIT_OK


def cmd_translate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out_dir = _prepare_output(args, config)
    generator, header = load_generator(args.checkpoint, config.device)
    attribute_names = header['attribute_names']
    edits = parse_attribute_edits(args.edit, attribute_names)

    records = _load_records(args.input, config, header['resolution'], 'all')
    if records.attribute_names != attribute_names:
        raise DataFormatError(f"input attributes {records.attribute_names} differ from the checkpoint's "
                              f"{attribute_names}")
    targets = np.stack([apply_edits(r.target_attrs, edits) for r in records])
    images = torch.from_numpy(np.stack([r.image for r in records]))
    translated = translate_images(generator, images, torch.from_numpy(targets).float(),
                                  config.gan.eval_batch).numpy()

    suffix = edit_suffix(args.edit)
    outputs = [record.with_image(image, target, filename=f"{Path(record.filename).stem}_{suffix}.png")
               for record, image, target in zip(records, translated, targets)]
    write_dataset(outputs, out_dir, attribute_names)
    if args.sheet:
        rows = [[r.image, o.image] for r, o in zip(records[:8], outputs[:8])]
        create_comparison_sheet(rows, out_dir / 'comparison.png', labels=['input', suffix])
    logging.info(f"Translated {len(outputs)} images with {suffix}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out_dir = _prepare_output(args, config)
    generator, header = load_generator(args.checkpoint, config.device)
    pac = load_pac(args.pac, config.device)
    records = _load_records(args.data, config, header['resolution'], args.split)

    classifier = None
    if args.classifier:
        model, names = load_classifier(args.classifier, config.device)
        if names != header['attribute_names']:
            raise CheckpointError(f"classifier predicts {names}, translator edits {header['attribute_names']}")
        classifier = model
    else:
        spec = _synthetic_spec_of(args.data)
        if spec is not None:
            classifier = synthetic_attribute_classifier(spec)
        else:
            logging.warning("No --classifier given and data is not synthetic; attribute accuracy skipped")

    embedder = PacEmbedder(pac, config.eval.batch_size)
    report = evaluate_translations(generator, pac, records, header['attribute_names'], embedder,
                                   config.eval, classifier)
    report.save(out_dir / 'evaluation_report.json')
    print(report.format_table())
    return EXIT_OK


def cmd_augment(args: argparse.Namespace) -> int:
    overrides = {'fair': {}}
    if args.policy:
        overrides['fair']['augment_policy'] = args.policy
    if args.target_attribute:
        overrides['fair']['target_attribute'] = args.target_attribute
    config = resolve_config(args, overrides)
    out_dir = _prepare_output(args, config)
    generator, header = load_generator(args.checkpoint, config.device)

    records = _load_records(args.data, config, header['resolution'], 'all')
    attribute_names = records.attribute_names
    if config.fair.target_attribute not in attribute_names:
        raise ConfigError('target_attribute', f"unknown attribute '{config.fair.target_attribute}', "
                                              f"valid names: {', '.join(attribute_names)}")
    train_records = fairness_split(records, config.fair.split_ratios)['train']
    augmented = augment_records(generator, train_records, attribute_names.index(config.fair.target_attribute),
                                config.fair.augment_policy, config.gan.eval_batch)
    write_dataset(augmented, out_dir, attribute_names)
    logging.info(f"Augmented training set: {len(train_records)} -> {len(augmented)} records")
    return EXIT_OK


def cmd_fair_classify(args: argparse.Namespace) -> int:
    overrides = {'fair': {'target_attribute': args.target_attribute}} if args.target_attribute else None
    config = resolve_config(args, overrides)
    out_dir = _prepare_output(args, config)

    resolution = config.loader.out_size
    records = _load_records(args.data, config, resolution, 'all')
    splits = fairness_split(records, config.fair.split_ratios)
    train_records = splits['train']
    if args.train_data:
        augmented = _load_records(args.train_data, config, resolution, 'all')
        if augmented.attribute_names != records.attribute_names:
            raise DataFormatError("augmented and original datasets have different attribute columns")
        train_records = list(augmented)

    report, model = run_fair_classification(train_records, splits['test'], records.attribute_names,
                                            config.fair, splits['val'], config.device)
    report.save(out_dir)
    save_classifier(model, out_dir / 'classifier.ckpt', [config.fair.target_attribute])
    print(report.format_table())
    return EXIT_OK


def cmd_presets(args: argparse.Namespace) -> int:
    manager = PresetManager(args.preset_dir)
    if args.show:
        print(json.dumps(manager.get_preset(args.show).to_dict(), indent=2))
        return EXIT_OK
    for category in manager.get_categories():
        print(category)
        for preset_id, preset in sorted(manager.get_all_presets().items()):
            if preset.category == category:
                print(f"  {preset_id:<10} {preset.description}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser, needs_out: bool = True):
    parser.add_argument('--config', help='Run config JSON file')
    parser.add_argument('--preset', action='append', help='Preset to apply (repeatable, applied in order)')
    parser.add_argument('--preset-dir', help='Directory of custom preset JSON files')
    parser.add_argument('--set', action='append', metavar='SECTION.FIELD=VALUE', help='Config override')
    parser.add_argument('--seed', type=int, help='Seed propagated to every section')
    parser.add_argument('--device', help='Torch device (cpu, cuda)')
    if needs_out:
        parser.add_argument('--out', required=True, help='Output directory')
    parser.add_argument('--log-file', help='Copy log records to this file')
    parser.add_argument('--verbose', action='store_true', help='Debug logging')


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='fair_translate', description='Fairness-aware attribute translation toolkit')
    subparsers = parser.add_subparsers(dest='command', parser_class=ArgumentParser)
    subparsers.required = True

    p = subparsers.add_parser('synth-data', help='Generate a synthetic annotated dataset')
    _add_common(p)
    p.add_argument('--n', type=int, help='Number of samples')
    p.add_argument('--correlation', type=float, help='Protected / target correlation')
    p.add_argument('--resolution', type=int, help='Image edge length')
    p.set_defaults(handler=cmd_synth_data)

    p = subparsers.add_parser('train-pac', help='Train the protected attribute classifier')
    _add_common(p)
    p.add_argument('--data', required=True, help='Annotated dataset directory')
    p.add_argument('--target-data', help='Target-domain dataset directory (labels withheld)')
    p.add_argument('--epochs', type=int)
    p.set_defaults(handler=cmd_train_pac)

    p = subparsers.add_parser('train-gan', help='Train the translator')
    _add_common(p)
    p.add_argument('--data', required=True, help='Annotated dataset directory')
    p.add_argument('--pac', help='PAC checkpoint from train-pac')
    p.add_argument('--epochs', type=int)
    p.add_argument('--run-id', help='Run directory name under <out>/checkpoints')
    p.add_argument('--resume', action='store_true', help='Continue from the latest checkpoint')
    p.set_defaults(handler=cmd_train_gan)

    p = subparsers.add_parser('translate', help='Apply attribute edits to annotated images')
    _add_common(p)
    p.add_argument('--checkpoint', required=True, help='Translator checkpoint or run directory')
    p.add_argument('--input', required=True, help='Annotated input directory')
    p.add_argument('--edit', action='append', required=True, help='+name or -name (repeatable)')
    p.add_argument('--sheet', action='store_true', help='Also write comparison.png')
    p.set_defaults(handler=cmd_translate)

    p = subparsers.add_parser('evaluate', help='FPAD / FID / KID / attribute accuracy report')
    _add_common(p)
    p.add_argument('--checkpoint', required=True, help='Translator checkpoint or run directory')
    p.add_argument('--pac', required=True, help='PAC checkpoint')
    p.add_argument('--data', required=True, help='Annotated evaluation dataset')
    p.add_argument('--split', default='test', choices=['train', 'val', 'test', 'all'])
    p.add_argument('--classifier', help='Attribute classifier checkpoint for accuracy')
    p.set_defaults(handler=cmd_evaluate)

    p = subparsers.add_parser('augment', help='Build O plus G(O) for fair classification')
    _add_common(p)
    p.add_argument('--checkpoint', required=True, help='Translator checkpoint or run directory')
    p.add_argument('--data', required=True, help='Original annotated dataset')
    p.add_argument('--policy', choices=['union', 'generated'])
    p.add_argument('--target-attribute', help='Attribute flipped by the translation')
    p.set_defaults(handler=cmd_augment)

    p = subparsers.add_parser('fair-classify', help='Train and audit an attribute classifier')
    _add_common(p)
    p.add_argument('--data', required=True, help='Original annotated dataset (val / test splits)')
    p.add_argument('--train-data', help='Augmented training set replacing the original train split')
    p.add_argument('--target-attribute', help='Attribute to classify')
    p.set_defaults(handler=cmd_fair_classify)

    p = subparsers.add_parser('presets', help='List or show presets')
    p.add_argument('--preset-dir', help='Directory of custom preset JSON files')
    p.add_argument('--show', help='Print one preset')
    p.add_argument('--verbose', action='store_true')
    p.add_argument('--log-file')
    p.set_defaults(handler=cmd_presets)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code"""
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    configure_logging(args.log_file, logging.DEBUG if args.verbose else logging.INFO)

    try:
        return args.handler(args)
    except FairTranslateError as e:
        logging.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logging.warning("Interrupted by user")
        return EXIT_INTERRUPTED


def main():
    sys.exit(run())
