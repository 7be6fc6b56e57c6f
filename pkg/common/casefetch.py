import logging
import os
from pathlib import Path

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

from common.helpers import REPO_ROOT, get_version

case_base_url = "https://raw.githubusercontent.com/MATPOWER/matpower/master/data"
headers = {
    "User-Agent": f"grid-ossa {get_version()}"
}

SHIPPED_CASE_DIR = REPO_ROOT / "cases"

# raw.githubusercontent.com occasionally resets connections on cold fetches of
# the larger case files; a module-level Session with a Retry adapter covers
# connect/read errors as well as 5xx/429 responses.
_REQUEST_TIMEOUT = 30

_retry = Retry(
    total=4,
    connect=4,
    read=4,
    status=4,
    backoff_factor=0.5,
    status_forcelist=(429, 500, 502, 503, 504),
    allowed_methods=("GET", "HEAD"),
    raise_on_status=False,
)
_session = requests.Session()
_adapter = HTTPAdapter(max_retries=_retry)
_session.mount("https://", _adapter)
_session.mount("http://", _adapter)


def _get(url):
    """GET with retries and a timeout. None when every attempt failed."""
    try:
        return _session.get(url, headers=headers, timeout=_REQUEST_TIMEOUT)
    except requests.exceptions.RequestException as exc:
        logging.warning(f"Request for {url} failed after retries: {exc}")
        return None


def default_cache_dir():
    return Path(os.environ.get("GRID_OSSA_CASE_DIR", Path.home() / ".cache" / "grid-ossa"))


def case_url(name):
    """
    Raw URL of a case file in the public MATPOWER data directory.
    Example: "case118" -> ".../data/case118.m"
    """
    stem = name[:-2] if name.endswith(".m") else name
    return f"{case_base_url}/{stem}.m"


def fetch_case(name, cache_dir=None):
    """
    Download `name` into the cache directory unless already present.
    Returns the local path, or None when the download failed.
    """
    stem = name[:-2] if name.endswith(".m") else name
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    target = cache_dir / f"{stem}.m"

    if target.exists() and target.stat().st_size > 0:
        logging.debug(f"Using cached case file {target}")
        return target

    url = case_url(stem)
    logging.info(f"Fetching case {stem} from {url}...")
    r = _get(url)

    if r is None or not r.ok:
        status = r.status_code if r is not None else "no response"
        logging.info(f"Unable to fetch case file ({url} returned {status})")
        return None

    if "mpc.bus" not in r.text:
        logging.warning(f"Downloaded {url} does not look like a case file")
        return None

    os.makedirs(cache_dir, exist_ok=True)
    target.write_text(r.text, encoding="utf-8")
    logging.info(f"  Cached {len(r.text):,} bytes to {target}")
    return target


def resolve_case(case, cache_dir=None):
    """
    Turn a --case argument into a readable path.

    An existing path is returned unchanged. A bare name such as "case118" is
    looked up in the shipped cases/ directory, then the cache, and finally
    downloaded. Raises FileNotFoundError when none of these succeed.
    """
    path = Path(case)
    if path.exists():
        return path

    stem = path.name[:-2] if path.name.endswith(".m") else path.name
    shipped = SHIPPED_CASE_DIR / f"{stem}.m"
    if shipped.exists():
        return shipped

    fetched = fetch_case(stem, cache_dir=cache_dir)
    if fetched is None:
        raise FileNotFoundError(f"Case {case!r} is neither a file nor a downloadable case name")
    return fetched
