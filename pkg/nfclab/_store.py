"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of the log store, a directory of JSON session logs addressed by
integer ids.

"""

# import modules
import json
import logging
import os
import re
from pathlib import Path

import pandas as pd

from nfclab._core import NfcLabError, SessionLog

logger = logging.getLogger(__name__)


STORE_ENV = "NFCLAB_STORE"
DEFAULT_STORE = Path.home() / ".nfclab" / "logs"
_NAME_RE = re.compile(r"^log-(\d+)\.json$")


class LogStore:
    """
    Session logs kept as `log-<id>.json` files.

    Parameters
    ----------
    directory : str, Path or NoneType
        Store location. If None, NFCLAB_STORE or ~/.nfclab/logs is used.
    """

    def __init__(self, directory=None):
        if directory is None:
            directory = os.environ.get(STORE_ENV, str(DEFAULT_STORE))
        self.directory = Path(directory)

    def _path(self, log_id):
        return self.directory / ("log-%04d.json" % int(log_id))

    def ids(self):
        if not self.directory.is_dir():
            return []
        found = (_NAME_RE.match(p.name) for p in self.directory.iterdir())
        return sorted(int(m.group(1)) for m in found if m)

    def save(self, log, log_id=None):
        """Store `log` under a new or the given id, returns the id."""
        if log_id is None:
            ids = self.ids()
            log_id = ids[-1] + 1 if ids else 1
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self._path(log_id)
        path.write_text(json.dumps(log.to_dict(), indent=1))
        logger.info("stored %r as log %d", log, log_id)
        return int(log_id)

    def load(self, log_id):
        path = self._path(log_id)
        if not path.is_file():
            raise NfcLabError("no log with id %s in %s"
                              % (log_id, self.directory))
        return SessionLog.from_dict(json.loads(path.read_text()))

    def delete(self, log_id):
        self._path(log_id).unlink()

    def __contains__(self, log_id):
        return self._path(log_id).is_file()

    def overview(self):
        """One row per stored log."""
        rows = []
        for log_id in self.ids():
            log = self.load(log_id)
            rows.append({"id": log_id, "mode": log.mode.value,
                         "created": pd.Timestamp(log.created, unit="ns"),
                         "entries": len(log),
                         "tech": None if log.initial is None
                         else log.initial.tech.name})
        return pd.DataFrame(rows, columns=["id", "mode", "created",
                                           "entries", "tech"])
