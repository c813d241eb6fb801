"""Datasets: named sessions, each an ordered list of store partitions.

The ``dataset.json`` file holds ``{"name": ..., "sessions": [{"name": ...,
"partitions": [path, ...]}]}``. Relative partition paths are resolved
against the directory containing the file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .store import CATALOG

DATASET_FILE = "dataset.json"

PathLike = Union[str, os.PathLike]


class DatasetError(Exception):
    pass


@dataclass
class Session:
    name: str
    partitions: list[str] = field(default_factory=list)


@dataclass
class Dataset:
    name: str
    sessions: list[Session] = field(default_factory=list)
    path: Path = field(default=Path(DATASET_FILE), compare=False)

    @staticmethod
    def _file(path: PathLike) -> Path:
        p = Path(path)
        return p / DATASET_FILE if p.is_dir() or p.suffix != ".json" else p

    @classmethod
    def create(cls, path: PathLike, name: str) -> "Dataset":
        f = cls._file(path)
        if f.exists():
            raise DatasetError(f"dataset already exists at {f}")
        f.parent.mkdir(parents=True, exist_ok=True)
        ds = cls(name, [], f)
        ds.save()
        return ds

    @classmethod
    def load(cls, path: PathLike) -> "Dataset":
        f = cls._file(path)
        try:
            raw = json.loads(f.read_text(encoding="utf-8"))
            ds = cls(raw["name"], [Session(s["name"], list(s["partitions"])) for s in raw["sessions"]], f)
        except FileNotFoundError:
            raise DatasetError(f"no dataset at {f}") from None
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetError(f"malformed dataset file {f}: {exc}") from None
        ds.validate()
        return ds

    def validate(self) -> None:
        names = [s.name for s in self.sessions]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise DatasetError(f"duplicate session names: {', '.join(dupes)}")
        for s in self.sessions:
            for p in s.partitions:
                if not (self.resolve(p) / CATALOG).exists():
                    raise DatasetError(f"partition {p!r} of session {s.name!r} is not a store")

    def resolve(self, partition: str) -> Path:
        p = Path(partition)
        return p if p.is_absolute() else self.path.parent / p

    def session(self, name: str) -> Session:
        for s in self.sessions:
            if s.name == name:
                return s
        raise DatasetError(f"no session named {name!r}")

    def partition_paths(self, name: str) -> list[Path]:
        return [self.resolve(p) for p in self.session(name).partitions]

    def add(self, session: str, store: PathLike) -> None:
        """Append a store to ``session``, creating the session if needed."""
        store = Path(store)
        if not (store / CATALOG).exists():
            raise DatasetError(f"{store} is not a store")
        try:
            rel = os.path.relpath(store.resolve(), self.path.parent.resolve())
        except ValueError:
            rel = str(store.resolve())
        try:
            s = self.session(session)
        except DatasetError:
            s = Session(session)
            self.sessions.append(s)
        s.partitions.append(Path(rel).as_posix())
        self.save()

    def to_dict(self) -> dict:
        return {"name": self.name, "sessions": [{"name": s.name, "partitions": s.partitions} for s in self.sessions]}

    def save(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, self.path)
