#!/usr/bin/env python
"""
Download public density maps from the EMDB archive.

The map is fetched as emd_NNNN.map.gz over HTTPS, the gzip layer is removed
in memory, the result is validated with read_mrc and written atomically.

USAGE:
    python emdb_fetch.py EMD-1234 out.mrc
"""

import gzip
import logging
import re
import sys
import zlib

import requests
from tqdm import tqdm

from config import FETCH_CONFIG, atomic_write_bytes
from errors import ChecksumOrParseFailure, CryoInrError, InvalidAccession, NetworkError, NotFound
from mrc_io import read_mrc

logger = logging.getLogger(__name__)

ACCESSION_RE = re.compile(r'^EMD-(\d{4,5})$')


def parse_accession(accession):
    """'EMD-1234' -> '1234'; raises InvalidAccession before any network call."""
    match = ACCESSION_RE.match(str(accession).strip().upper())
    if not match:
        raise InvalidAccession(f"{accession!r} is not an EMDB accession (expected EMD-NNNN)")
    return match.group(1)


def map_url(accession):
    return FETCH_CONFIG['url_pattern'].format(number=parse_accession(accession))


def download(url, timeout=None, progress=False):
    """GET url and return the body; maps HTTP/transport failures to fetch errors."""
    timeout = FETCH_CONFIG['timeout'] if timeout is None else timeout
    try:
        response = requests.get(url, stream=True, timeout=timeout)
    except requests.RequestException as e:
        raise NetworkError(f"{url}: {e}") from e
    if response.status_code == 404:
        raise NotFound(f"{url}: HTTP 404")
    if response.status_code != 200:
        raise NetworkError(f"{url}: HTTP {response.status_code}")

    total = int(response.headers.get('content-length', 0)) or None
    chunks = []
    try:
        with tqdm(total=total, unit='B', unit_scale=True, desc='download', disable=not progress) as bar:
            for chunk in response.iter_content(chunk_size=FETCH_CONFIG['block_size']):
                chunks.append(chunk)
                bar.update(len(chunk))
    except requests.RequestException as e:
        raise NetworkError(f"{url}: transfer interrupted: {e}") from e
    return b''.join(chunks)


def fetch_map(accession, output, timeout=None, progress=False):
    """Download, gunzip, validate and save one map. Returns the VoxelGrid."""
    url = map_url(accession)
    logger.info(f"Fetching {accession} from {url}")
    body = download(url, timeout=timeout, progress=progress)
    try:
        raw = gzip.decompress(body)
    except (OSError, EOFError, zlib.error) as e:
        raise ChecksumOrParseFailure(f"{url}: gzip layer invalid: {e}") from e
    try:
        grid = read_mrc(raw)
    except CryoInrError as e:
        raise ChecksumOrParseFailure(f"{url}: not a valid MRC map: {e}") from e
    atomic_write_bytes(output, raw)
    logger.info(f"Saved {accession} ({grid.dims[0]}x{grid.dims[1]}x{grid.dims[2]}) to {output}")
    return grid


if __name__ == '__main__':
    if len(sys.argv) != 3:
        print(f"Usage: python {sys.argv[0]} EMD-NNNN out.mrc")
        sys.exit(1)
    try:
        fetch_map(sys.argv[1], sys.argv[2], progress=True)
    except CryoInrError as e:
        print(f"Error: {e}")
        sys.exit(e.exit_code)
