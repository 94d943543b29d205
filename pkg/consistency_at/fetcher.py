import logging
import tarfile
import tempfile
from pathlib import Path
from typing import Dict, Optional, Union

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

from consistency_at.core.datasets import DATASETS, resolve_data_root
from consistency_at.errors import DatasetMissingError
from consistency_at.utils import ensure_directory

# archive url, directory the archive unpacks to
SOURCES: Dict[str, Dict[str, str]] = {
    'cifar10': {
        'url': 'https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz',
        'directory': DATASETS['cifar10']['directory'],
    },
    'cifar100': {
        'url': 'https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz',
        'directory': DATASETS['cifar100']['directory'],
    },
    'cifar10c': {
        'url': 'https://zenodo.org/record/2535967/files/CIFAR-10-C.tar',
        'directory': 'CIFAR-10-C',
    },
}


# member sanitizing where tarfile supports it
EXTRACT_KWARGS = {'filter': 'data'} if hasattr(tarfile, 'data_filter') else {}


class DatasetFetcher:
    def __init__(self, root: Union[str, Path], retries: int = 3, backoff_factor: float = 1.0,
                 timeouts: Optional[Dict[str, float]] = None, user_agent: str = 'consistency_at/1.0'):
        self.root = resolve_data_root(root)
        self.timeouts = timeouts or {'connect': 10, 'read': 60}

        self.session = requests.Session()
        self.session.headers.update({'User-Agent': user_agent})
        retry_strategy = Retry(
            total=retries,
            backoff_factor=backoff_factor,
            status_forcelist=[429, 500, 502, 503, 504],
            allowed_methods=["HEAD", "GET", "OPTIONS"]
        )
        adapter = HTTPAdapter(max_retries=retry_strategy)
        self.session.mount("https://", adapter)
        self.session.mount("http://", adapter)
        self.logger = logging.getLogger(__name__)

    def target(self, name: str) -> Path:
        if name not in SOURCES:
            raise ValueError(f"unknown download {name!r}; choose from {sorted(SOURCES)}")
        return self.root / SOURCES[name]['directory']

    def download_file(self, url: str, target_path: Union[str, Path]):
        """Stream url into target_path; raises requests exceptions on failure."""
        timeout = (self.timeouts['connect'], self.timeouts['read'])
        response = self.session.get(url, timeout=timeout, stream=True, allow_redirects=True)
        response.raise_for_status()
        with open(target_path, 'wb') as f:
            for chunk in response.iter_content(chunk_size=1 << 20):
                f.write(chunk)

    def fetch(self, name: str, force: bool = False) -> Path:
        """
        Download and unpack an archive under the data root. An existing
        target directory is kept unless force is set.
        """
        target = self.target(name)
        if target.exists() and not force:
            self.logger.info(f"{target} already present; skipping download")
            return target

        url = SOURCES[name]['url']
        ensure_directory(self.root)
        self.logger.info(f"Downloading {url} into {self.root}")
        with tempfile.TemporaryDirectory(dir=self.root) as tmp:
            archive = Path(tmp) / url.rsplit('/', 1)[-1]
            try:
                self.download_file(url, archive)
                with tarfile.open(archive, 'r:*') as tar:
                    tar.extractall(self.root, **EXTRACT_KWARGS)
            except (requests.exceptions.RequestException, tarfile.TarError, OSError) as e:
                self.logger.error(f"Error fetching {url}: {e}")
                raise DatasetMissingError(str(target), f"archive from {url}") from e

        if not target.exists():
            raise DatasetMissingError(str(target), f"archive from {url} to unpack into {target.name}/")
        self.logger.info(f"Unpacked {name} into {target}")
        return target
