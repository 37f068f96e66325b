import gzip

import pytest
import requests

import emdb_fetch
from errors import ChecksumOrParseFailure, InvalidAccession, NetworkError, NotFound
from mrc_io import load_mrc, write_mrc


class FakeResponse:
    def __init__(self, status_code=200, body=b'', fail_midway=False):
        self.status_code = status_code
        self.headers = {'content-length': str(len(body))}
        self.body = body
        self.fail_midway = fail_midway

    def iter_content(self, chunk_size=1):
        for start in range(0, len(self.body), chunk_size):
            if self.fail_midway and start > 0:
                raise requests.ConnectionError('connection reset')
            yield self.body[start:start + chunk_size]


@pytest.fixture
def fake_get(monkeypatch):
    calls = []

    def install(response=None, error=None):
        def get(url, stream=False, timeout=None):
            calls.append(url)
            if error is not None:
                raise error
            return response
        monkeypatch.setattr(emdb_fetch.requests, 'get', get)
        return calls
    return install


def test_accessions():
    assert emdb_fetch.parse_accession('EMD-1234') == '1234'
    assert emdb_fetch.parse_accession(' emd-12345 ') == '12345'
    assert emdb_fetch.map_url('EMD-1234') == \
        'https://files.wwpdb.org/pub/emdb/structures/EMD-1234/map/emd_1234.map.gz'
    for bad in ('1234', 'EMD-12', 'EMD-123456', 'PDB-1234', ''):
        with pytest.raises(InvalidAccession):
            emdb_fetch.parse_accession(bad)


def test_invalid_accession_makes_no_request(tmp_path, fake_get):
    calls = fake_get(FakeResponse())
    with pytest.raises(InvalidAccession):
        emdb_fetch.fetch_map('EMD-x', tmp_path / 'out.mrc')
    assert calls == []


def test_not_found(tmp_path, fake_get):
    fake_get(FakeResponse(status_code=404))
    with pytest.raises(NotFound) as excinfo:
        emdb_fetch.fetch_map('EMD-9999', tmp_path / 'out.mrc')
    assert excinfo.value.exit_code == 3
    assert not (tmp_path / 'out.mrc').exists()


@pytest.mark.parametrize('kwargs', [
    {'error': requests.ConnectionError('no route to host')},
    {'response': FakeResponse(status_code=503)},
])
def test_network_failures(tmp_path, fake_get, kwargs):
    fake_get(**kwargs)
    with pytest.raises(NetworkError) as excinfo:
        emdb_fetch.fetch_map('EMD-1234', tmp_path / 'out.mrc')
    assert excinfo.value.exit_code == 2


def test_interrupted_transfer(fake_get):
    fake_get(FakeResponse(body=bytes(3 << 20), fail_midway=True))
    with pytest.raises(NetworkError):
        emdb_fetch.download('https://example.invalid/x.gz')


@pytest.mark.parametrize('body', [b'plainly not gzip', gzip.compress(b'not an mrc file at all')])
def test_bad_payloads(tmp_path, fake_get, body):
    fake_get(FakeResponse(body=body))
    with pytest.raises(ChecksumOrParseFailure) as excinfo:
        emdb_fetch.fetch_map('EMD-1234', tmp_path / 'out.mrc')
    assert excinfo.value.exit_code == 4
    assert not (tmp_path / 'out.mrc').exists()


def test_successful_fetch(tmp_path, fake_get, small_grid):
    raw = write_mrc(small_grid)
    calls = fake_get(FakeResponse(body=gzip.compress(raw)))
    grid = emdb_fetch.fetch_map('EMD-1234', tmp_path / 'maps' / 'emd_1234.mrc')
    assert calls == [emdb_fetch.map_url('EMD-1234')]
    assert grid == small_grid
    assert (tmp_path / 'maps' / 'emd_1234.mrc').read_bytes() == raw
    assert load_mrc(tmp_path / 'maps' / 'emd_1234.mrc') == small_grid


@pytest.mark.network
def test_live_download(tmp_path):
    grid = emdb_fetch.fetch_map('EMD-1832', tmp_path / 'emd_1832.mrc')
    assert min(grid.dims) > 0
