from pathlib import Path
from typing import Iterable, NamedTuple, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError, model_validator

from .embed_core import FloatArray
from .errors import DataError, ParseError

RecordT = TypeVar("RecordT", bound=BaseModel)


class Contact(BaseModel):
    """A contact name of one utterance's dynamic vocabulary"""

    orthography: str
    pron: str  # space separated phoneme symbols


class Utterance(BaseModel):
    id: str
    frames: list[list[float]]
    ref_words: list[int]
    ref_prons: list[int]
    ref_orths: list[str] = []
    contacts: list[Contact] = []
    is_contact_mask: list[bool]
    # [start, end) frame range of every reference word
    word_spans: list[tuple[int, int]] = []

    @model_validator(mode="after")
    def check_lengths(self) -> "Utterance":
        if not len(self.ref_words) == len(self.ref_prons) == len(self.is_contact_mask):
            raise ValueError("ref_words, ref_prons and is_contact_mask differ in length")
        if self.ref_orths and len(self.ref_orths) != len(self.ref_words):
            raise ValueError("ref_orths and ref_words differ in length")
        return self

    @property
    def frame_array(self) -> FloatArray:
        return np.asarray(self.frames, dtype=np.float64)


class DecodeRecord(BaseModel):
    id: str
    hyp_words: list[str] = []
    hyp_is_contact: list[bool] = []
    score: float | None = None
    error: str | None = None


class AmbiguousPair(NamedTuple):
    long_word: int
    short_word: int


def write_jsonl(path: Path, records: Iterable[BaseModel]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(record.model_dump_json())
            f.write("\n")


def read_jsonl(path: Path, model: type[RecordT]) -> list[RecordT]:
    if not path.exists():
        raise DataError(f"File not found: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(model.model_validate_json(line))
            except ValidationError as e:
                raise ParseError(str(e).splitlines()[0], line_number, str(path)) from None
    return records
