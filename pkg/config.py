"""
cryoinr Configuration Module
Training defaults, architecture profiles, logging and file-system helpers
"""

import logging
import logging.handlers
import os
import platform
import tempfile
from pathlib import Path

from errors import UnknownProfile

# Detect operating system
SYSTEM = platform.system()  # 'Windows', 'Darwin' (macOS), 'Linux'

# Determine base directory
def get_base_directory():
    """
    Get the base directory for the cryoinr installation.
    Returns the directory containing this config.py file.
    """
    return Path(__file__).parent.resolve()

# Base directory (where the repository is located)
BASE_DIR = get_base_directory()

# Environment variable consulted when no --seed flag is given
SEED_ENV_VAR = 'CRYOINR_SEED'

# Named width chains. "Re" marks a residual block at the current width.
ARCH_PROFILES = {
    'full': '127-2048-Re-Re-1024-Re-512-Re-256-1',
    'desk': '127-160-Re-128-1',
    'tiny': '127-16-Re-8-1',
}

# Training schedule
TRAIN_DEFAULTS = {
    'epochs': 100,
    'learning_rate': 0.001,
    'batch_size': 1024,
    'chunk_size': 1_000_000,
    'early_stop_patience': 10,
    'validation_fraction': 0.01,
    'seed': 0,
    'lr_decay': None,         # per-epoch multiplicative factor, None = constant
    'lr_final': None,         # alternative: decay from learning_rate to lr_final
    'profile': 'full',
    'value_mean_scope': 'batch',   # 'batch' or 'chunk'
    'min_delta': 1e-6,
}

# Coordinate encoding and latent identifiers
ENCODING_CONFIG = {
    'num_frequencies': 10,    # 2^0 .. 2^9
    'latent_dim': 64,
    'leaky_slope': 0.01,
}

# Weighted loss
LOSS_CONFIG = {
    'epsilon': 1e-4,
    'error_percentile': 90,
    'error_boost': 3.0,
}

# Optimizer
ADAM_CONFIG = {
    'beta1': 0.9,
    'beta2': 0.999,
    'eps': 1e-8,
}

# Preprocessing / reconstruction
PREPROCESS_CONFIG = {
    'threshold': 0.0,
    'fill_value': 0.0,
}

# Evaluation report
METRICS_CONFIG = {
    'band_edges': (0.07, 0.15),
    'band_names': ('Low', 'Medium', 'High'),
    'within_pct': 20.0,
}

# EMDB download
FETCH_CONFIG = {
    'url_pattern': 'https://files.wwpdb.org/pub/emdb/structures/EMD-{number}/map/emd_{number}.map.gz',
    'timeout': 60,
    'block_size': 1 << 20,
}

# Application settings
APP_SETTINGS = {
    'app_title': 'cryoinr - neural compression for Cryo-EM maps',
    'archive_suffix': '.cemz',
}

# Logging configuration
LOG_CONFIG = {
    'log_file': None,
    'log_level': 'INFO',
    'format': '%(asctime)s - %(levelname)s - %(message)s',
    'max_log_size': 10 * 1024 * 1024,  # 10 MB
    'backup_count': 3,
}

def setup_logging(level=None, log_file=None):
    """Configure the root logger; adds a rotating file handler when log_file is set."""
    level = level or LOG_CONFIG['log_level']
    handlers = [logging.StreamHandler()]
    log_file = log_file or LOG_CONFIG['log_file']
    if log_file:
        handlers.append(logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=LOG_CONFIG['max_log_size'],
            backupCount=LOG_CONFIG['backup_count'],
        ))
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_CONFIG['format'],
        handlers=handlers,
        force=True,
    )

def get_seed(explicit=None):
    """Seed resolution: explicit value, then $CRYOINR_SEED, then the default."""
    if explicit is not None:
        return int(explicit)
    env = os.environ.get(SEED_ENV_VAR)
    if env not in (None, ''):
        return int(env)
    return TRAIN_DEFAULTS['seed']

def get_architecture(profile):
    """Return the width chain for a profile name, or the string itself if it is already a chain."""
    if profile in ARCH_PROFILES:
        return ARCH_PROFILES[profile]
    if '-' in str(profile):
        return str(profile)
    raise UnknownProfile(f"Unknown architecture profile: {profile!r} (known: {', '.join(ARCH_PROFILES)})")

# File system helpers
def ensure_directory_exists(path):
    """Ensure a directory exists, create if it doesn't."""
    Path(path).mkdir(parents=True, exist_ok=True)
    return path

def atomic_write_bytes(path, data):
    """Write data next to path under a temporary name, then move it into place."""
    path = Path(path)
    ensure_directory_exists(path.parent if str(path.parent) else '.')
    fd, tmp_name = tempfile.mkstemp(prefix=f'.{path.name}.', suffix='.tmp', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return str(path)

# Print configuration info (for debugging)
def print_config():
    """Print current configuration for debugging."""
    print("=" * 60)
    print("cryoinr Configuration")
    print("=" * 60)
    print(f"Operating System: {SYSTEM}")
    print(f"Base Directory: {BASE_DIR}")
    print(f"Seed ({SEED_ENV_VAR}): {get_seed()}")
    for name, section in [('Training', TRAIN_DEFAULTS), ('Encoding', ENCODING_CONFIG),
                          ('Loss', LOSS_CONFIG), ('Adam', ADAM_CONFIG),
                          ('Metrics', METRICS_CONFIG)]:
        print(f"{name}:")
        for key, value in section.items():
            print(f"  {key}: {value}")
    print("Architecture profiles:")
    for name, chain in ARCH_PROFILES.items():
        print(f"  {name}: {chain}")
    print("=" * 60)

# Export main configuration items
__all__ = [
    'BASE_DIR',
    'SYSTEM',
    'SEED_ENV_VAR',
    'ARCH_PROFILES',
    'TRAIN_DEFAULTS',
    'ENCODING_CONFIG',
    'LOSS_CONFIG',
    'ADAM_CONFIG',
    'PREPROCESS_CONFIG',
    'METRICS_CONFIG',
    'FETCH_CONFIG',
    'APP_SETTINGS',
    'LOG_CONFIG',
    'setup_logging',
    'get_seed',
    'get_architecture',
    'ensure_directory_exists',
    'atomic_write_bytes',
    'print_config',
]

# Run configuration check if executed directly
if __name__ == '__main__':
    print_config()
