"""Named-tensor checkpoints stored as uncompressed ``.npz`` archives.

Each array keeps its dtype and shape (the ``.npy`` header inside the archive), so
float64 parameters round-trip bit-exactly.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict

import numpy as np
import torch


def save_tensors(tensors: Dict[str, torch.Tensor], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_tensors(path) -> Dict[str, torch.Tensor]:
    with np.load(Path(path), allow_pickle=False) as data:
        return {k: torch.from_numpy(data[k].copy()) for k in data.files}


def client_file(directory, domain_id: int, name: str) -> Path:
    return Path(directory) / f"client_{domain_id}_{name}.npz"


def save_run(directory, clients, server=None):
    """One file per client plus ``server.npz`` when a server exists."""
    paths = [save_tensors(c.state(), client_file(directory, c.domain_id, c.name)) for c in clients]
    if server is not None:
        paths.append(save_tensors(server.state(), Path(directory) / "server.npz"))
    return paths


def load_run(directory, clients, server=None):
    for c in clients:
        path = client_file(directory, c.domain_id, c.name)
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        c.load_state(load_tensors(path))
    if server is not None and (Path(directory) / "server.npz").exists():
        server.load_state(load_tensors(Path(directory) / "server.npz"))
