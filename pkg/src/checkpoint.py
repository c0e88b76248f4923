"""
Checkpoint container for Fair Translate
Versioned torch files with a role-tagged header, run directories and the `latest` pointer
"""
import hashlib
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch

from src.errors import CheckpointError

FORMAT_VERSION = 1
LATEST_POINTER = 'latest'
CACHE_ENV_VAR = 'FAIRTRANSLATE_CACHE'

ROLES = ('pac', 'translator', 'classifier')


def save_checkpoint(path: Union[str, Path], role: str, header: Dict[str, Any], payload: Dict[str, Any]) -> Path:
    """
    Save a role-tagged checkpoint

    Args:
        path: Output file
        role: One of ROLES
        header: Metadata stored next to the format version
        payload: State dicts and counters

    Returns:
        Path to the checkpoint
    """
    if role not in ROLES:
        raise CheckpointError(f"unknown checkpoint role '{role}'")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    full_header = dict(header)
    full_header.update({
        'format_version': FORMAT_VERSION,
        'role': role,
        'created': datetime.now().isoformat(),
    })
    torch.save({'header': full_header, 'payload': payload}, str(path))
    logging.info(f"Saved {role} checkpoint: {path}")
    return path


def load_checkpoint(path: Union[str, Path], expected_role: str,
                    map_location: Optional[str] = 'cpu') -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """
    Load a checkpoint and check its role and format version

    Args:
        path: Checkpoint file, run directory, or cache-relative path
        expected_role: Role the caller needs
        map_location: Device for loaded tensors

    Returns:
        Tuple of (header, payload)
    """
    path = resolve_checkpoint_path(path)
    try:
        # payload holds optimizer and RNG states, which need full unpickling
        blob = torch.load(str(path), map_location=map_location, weights_only=False)
    except Exception as e:
        logging.error(f"Error reading checkpoint {path}: {str(e)}")
        raise CheckpointError(f"could not read checkpoint {path}: {e}") from e

    if not isinstance(blob, dict) or 'header' not in blob or 'payload' not in blob:
        raise CheckpointError(f"{path} is not a Fair Translate checkpoint")
    header = blob['header']
    if header.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format_version {header.get('format_version')}, expected {FORMAT_VERSION}")
    if header.get('role') != expected_role:
        raise CheckpointError(f"{path} holds a '{header.get('role')}' checkpoint, expected '{expected_role}'")
    return header, blob['payload']


def write_latest_pointer(run_dir: Union[str, Path], filename: str) -> Path:
    """Record the newest checkpoint filename of a run"""
    pointer = Path(run_dir) / LATEST_POINTER
    tmp = pointer.with_suffix('.tmp')
    tmp.write_text(filename + '\n', encoding='utf-8')
    os.replace(tmp, pointer)
    return pointer


def resolve_latest(run_dir: Union[str, Path]) -> Path:
    """Path of the checkpoint the `latest` pointer names"""
    pointer = Path(run_dir) / LATEST_POINTER
    if not pointer.exists():
        raise CheckpointError(f"no '{LATEST_POINTER}' pointer in {run_dir}")
    target = Path(run_dir) / pointer.read_text(encoding='utf-8').strip()
    if not target.exists():
        raise CheckpointError(f"'{LATEST_POINTER}' in {run_dir} points to missing file {target.name}")
    return target


def resolve_checkpoint_path(path: Union[str, Path]) -> Path:
    """
    Locate a checkpoint

    A run directory resolves through its `latest` pointer. Paths missing
    locally are looked up under $FAIRTRANSLATE_CACHE.
    """
    candidates = [Path(path)]
    cache = os.environ.get(CACHE_ENV_VAR)
    if cache and not Path(path).is_absolute():
        candidates.append(Path(cache) / path)

    for candidate in candidates:
        if candidate.is_dir():
            return resolve_latest(candidate)
        if candidate.is_file():
            return candidate

    hint = f" (also looked in ${CACHE_ENV_VAR})" if cache else ""
    logging.error(f"Checkpoint not found: {path}{hint}")
    raise CheckpointError(f"checkpoint not found: {path}{hint}")


def parameter_hash(module: torch.nn.Module) -> str:
    """SHA-256 over a module's state dict, for frozen-model checks"""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode('utf-8'))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
