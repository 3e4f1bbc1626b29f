"""State-action transfer datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, ShapeError


@dataclass(frozen=True)
class TransferDataset:
    """Paired states (m, n) and actions (m, k).

    Plays the role of the victim transfer set, the attacker-generated set
    and the stored best-distribution set. ``val_index`` optionally marks
    a fixed validation split (indices into the pairs).
    """

    states: np.ndarray
    actions: np.ndarray
    val_index: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.float64)
        a = np.asarray(self.actions, dtype=np.float64)
        if s.ndim != 2 or a.ndim != 2:
            raise ShapeError("states and actions must be 2-d arrays")
        if s.shape[0] != a.shape[0]:
            raise ShapeError(f"{s.shape[0]} states but {a.shape[0]} actions")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)

    def __len__(self):
        return self.states.shape[0]

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]

    def subset(self, index) -> TransferDataset:
        index = np.asarray(index, dtype=np.int64)
        return TransferDataset(self.states[index], self.actions[index])

    def split(self, val_fraction, rng) -> tuple[TransferDataset, TransferDataset]:
        """Shuffle and cut into (train, validation).

        The validation split holds ``max(1, round(m * val_fraction))`` pairs.
        If a fixed ``val_index`` is attached it is used instead of shuffling.
        """
        m = len(self)
        if m < 2:
            raise EmptyInputError("need at least two pairs to split")
        if self.val_index is not None:
            mask = np.zeros(m, dtype=bool)
            mask[self.val_index] = True
            return self.subset(np.flatnonzero(~mask)), self.subset(np.flatnonzero(mask))
        n_val = min(m - 1, max(1, int(round(m * val_fraction))))
        perm = rng.permutation(m)
        return self.subset(perm[n_val:]), self.subset(perm[:n_val])

    def sample(self, count, rng) -> TransferDataset:
        """Draw ``count`` distinct pairs (all of them, shuffled, if count >= m).

        An attached split travels with the drawn pairs, as long as both
        sides stay non-empty.
        """
        m = len(self)
        if m == 0:
            raise EmptyInputError("cannot sample from an empty dataset")
        count = min(int(count), m)
        chosen = rng.choice(m, size=count, replace=False)
        out = self.subset(chosen)
        if self.val_index is not None:
            mask = np.zeros(m, dtype=bool)
            mask[self.val_index] = True
            keep = np.flatnonzero(mask[chosen])
            if 0 < keep.size < count:
                out = TransferDataset(out.states, out.actions, keep)
        return out

    def with_split(self, rng, val_fraction=0.1) -> TransferDataset:
        """Attach a shuffled fixed validation split."""
        m = len(self)
        n_val = min(m - 1, max(1, int(round(m * val_fraction)))) if m >= 2 else 0
        return TransferDataset(self.states, self.actions, np.sort(rng.permutation(m)[:n_val]))

    def train_part(self) -> TransferDataset:
        if self.val_index is None:
            return self
        mask = np.ones(len(self), dtype=bool)
        mask[self.val_index] = False
        return self.subset(np.flatnonzero(mask))

    def val_part(self) -> TransferDataset:
        if self.val_index is None:
            raise EmptyInputError("dataset carries no validation split")
        return self.subset(self.val_index)

    @staticmethod
    def concat(*parts: TransferDataset) -> TransferDataset:
        parts = [p for p in parts if len(p)]
        if not parts:
            raise EmptyInputError("nothing to concatenate")
        return TransferDataset(
            np.concatenate([p.states for p in parts]),
            np.concatenate([p.actions for p in parts]),
        )


def prune_data(d: TransferDataset) -> TransferDataset:
    """Keep only pairs whose action has no component exactly equal to +1 or -1."""
    keep = ~np.any((d.actions == 1.0) | (d.actions == -1.0), axis=1)
    return d.subset(np.flatnonzero(keep))
