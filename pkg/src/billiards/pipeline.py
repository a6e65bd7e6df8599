"""Layouts -> features -> tokens -> embedding-table row ids, with the settings pinned together."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .checkpoint import CheckpointError
from .core import GameSpec, Layout, PackedLayouts, TableGeometry, pack_layouts
from .features import extract_batch
from .tokens import TokenConfig, Vocabulary, global_ids, tokenize_batch


@dataclass(frozen=True)
class Featurizer:
    geom: TableGeometry = TableGeometry()
    spec: GameSpec = GameSpec()
    tokens: TokenConfig = TokenConfig()

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.build(self.tokens, self.geom)

    def pack(self, layouts: Union[Sequence[Layout], PackedLayouts]) -> PackedLayouts:
        if isinstance(layouts, PackedLayouts):
            return layouts
        return pack_layouts(layouts, self.spec)

    def token_ids(self, layouts) -> np.ndarray:
        """Family-local tokens ``(N, n, 27)``."""
        return tokenize_batch(extract_batch(self.pack(layouts), self.geom), self.tokens, self.geom)

    def ids(self, layouts) -> np.ndarray:
        """Global embedding row ids ``(N, n, 27)``."""
        return global_ids(self.token_ids(layouts), self.vocab)

    def to_meta(self) -> dict:
        return {
            "geometry": self.geom.to_dict(),
            "game_n": self.spec.n,
            "token_config": self.tokens.to_dict(),
            "vocabulary": self.vocab.to_dict(),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "Featurizer":
        fz = cls(TableGeometry(**meta["geometry"]), GameSpec(meta["game_n"]), TokenConfig(**meta["token_config"]))
        if fz.vocab.to_dict() != meta["vocabulary"]:
            raise CheckpointError("vocabulary stored in checkpoint does not match its token config")
        return fz

    def check_compatible(self, other: "Featurizer") -> None:
        if self.to_meta() != other.to_meta():
            raise CheckpointError("tokenisation settings differ from the checkpoint's; refusing to re-tokenise")
