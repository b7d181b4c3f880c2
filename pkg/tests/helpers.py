import hashlib
import json
from pathlib import Path


def tree_digest(root, exclude=("run.json",)):
    """Map of relative path to sha256 for every file under ``root``."""
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in exclude}


def write_config(path, dataset, output, seed=3, **train):
    train = {"batch_size": 4, "initial_level": 2, "seed": seed, "checkpoint_interval": 20,
             **train}
    cfg = {"schema_version": 1,
           "arch": {"L": 2, "d": 1, "base_resolution": 4, "latent_dim": 8,
                    "channel_schedule": [16, 8, 8]},
           "train": train,
           "paths": {"dataset": str(dataset), "output": str(output)}}
    Path(path).write_text(json.dumps(cfg, indent=1))
    return path
