import pytest

from config import (ARCH_PROFILES, SEED_ENV_VAR, TRAIN_DEFAULTS, atomic_write_bytes,
                    get_architecture, get_seed, print_config)
from errors import UnknownProfile
from inr_core import count_parameters


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    assert get_seed() == TRAIN_DEFAULTS['seed']
    monkeypatch.setenv(SEED_ENV_VAR, '17')
    assert get_seed() == 17
    assert get_seed(5) == 5
    monkeypatch.setenv(SEED_ENV_VAR, '')
    assert get_seed() == TRAIN_DEFAULTS['seed']


def test_architecture_lookup():
    assert get_architecture('desk') == ARCH_PROFILES['desk']
    assert get_architecture('127-32-1') == '127-32-1'
    with pytest.raises(UnknownProfile):
        get_architecture('huge')
    assert count_parameters(ARCH_PROFILES['desk']) == 92_737


def test_atomic_write_leaves_no_temporaries(tmp_path):
    target = tmp_path / 'nested' / 'blob.bin'
    assert atomic_write_bytes(target, b'first') == str(target)
    atomic_write_bytes(target, b'second')
    assert target.read_bytes() == b'second'
    assert [p.name for p in target.parent.iterdir()] == ['blob.bin']


def test_print_config(capsys):
    print_config()
    out = capsys.readouterr().out
    assert 'cryoinr Configuration' in out
    for name in ARCH_PROFILES:
        assert name in out
