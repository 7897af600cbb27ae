"""Seeded synthetic image/text pair datasets with injectable noisy correspondence.

Each identity owns a prototype vector. Image and text features of a pair are the
prototype plus independent Gaussian noise, so a clean pair is learnable and a
shuffled (noisy) pair carries another identity's text.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_TAG = "rml-pairs v1"


class ConfigError(ValueError):
    pass


class NoiseInjectionError(ValueError):
    pass


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    num_identities: int = 400
    images_per_identity: int = 4
    captions_per_image: int = 2
    raw_dim: int = 64
    intra_identity_noise_std: float = 0.6
    seed: int = 0
    latent_dim: int | None = 8

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ConfigError(f"num_identities must be >= 2, got {self.num_identities}")
        if self.raw_dim < 2:
            raise ConfigError(f"raw_dim must be >= 2, got {self.raw_dim}")
        if self.images_per_identity < 1 or self.captions_per_image < 1:
            raise ConfigError("images_per_identity and captions_per_image must be positive")
        if not self.intra_identity_noise_std >= 0:
            raise ConfigError("intra_identity_noise_std must be nonnegative")
        if self.latent_dim is not None and not 1 <= self.latent_dim <= self.raw_dim:
            raise ConfigError("latent_dim must lie in [1, raw_dim]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")


@dataclass(frozen=True)
class NoiseSpec:
    noise_rate: float = 0.0
    seed: int = 0


@dataclass
class PairDataset:
    """Column-oriented pair records.

    ``text_identity`` is the identity whose prototype produced ``text_raw``; like
    ``true_clean_flag`` it is hidden ground truth and never used for training.
    """

    pair_id: np.ndarray
    identity: np.ndarray
    image_label: np.ndarray
    correspondence_label: np.ndarray
    true_clean_flag: np.ndarray
    text_identity: np.ndarray
    image_raw: np.ndarray
    text_raw: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pair_id)

    @property
    def raw_dim(self) -> int:
        return self.image_raw.shape[1]

    def subset(self, idx) -> "PairDataset":
        idx = np.asarray(idx)
        return PairDataset(
            pair_id=self.pair_id[idx],
            identity=self.identity[idx],
            image_label=self.image_label[idx],
            correspondence_label=self.correspondence_label[idx],
            true_clean_flag=self.true_clean_flag[idx],
            text_identity=self.text_identity[idx],
            image_raw=self.image_raw[idx],
            text_raw=self.text_raw[idx],
            meta=dict(self.meta),
        )

    def copy(self) -> "PairDataset":
        return self.subset(np.arange(len(self)))

    def equals(self, other: "PairDataset") -> bool:
        cols = ("pair_id", "identity", "image_label", "correspondence_label",
                "true_clean_flag", "text_identity", "image_raw", "text_raw")
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in cols)


def generate(config: DatasetConfig) -> PairDataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    C, G, T = config.num_identities, config.images_per_identity, config.captions_per_image
    if config.latent_dim is None:
        prototypes = rng.standard_normal((C, config.raw_dim))
    else:
        # prototypes confined to a random subspace, scaled to the same expected norm
        basis = np.linalg.qr(rng.standard_normal((config.raw_dim, config.latent_dim)))[0]
        z = rng.standard_normal((C, config.latent_dim)) * np.sqrt(config.raw_dim / config.latent_dim)
        prototypes = z @ basis.T

    n_images = C * G
    identity_of_image = np.repeat(np.arange(1, C + 1), G)
    image_feats = prototypes[identity_of_image - 1] + config.intra_identity_noise_std * rng.standard_normal(
        (n_images, config.raw_dim)
    )
    # each image gets T captions, drawn from the same prototype independently
    image_idx = np.repeat(np.arange(n_images), T)
    identity = identity_of_image[image_idx]
    text_feats = prototypes[identity - 1] + config.intra_identity_noise_std * rng.standard_normal(
        (n_images * T, config.raw_dim)
    )
    n = n_images * T
    return PairDataset(
        pair_id=np.arange(n, dtype=np.int64),
        identity=identity.astype(np.int64),
        image_label=(image_idx + 1).astype(np.int64),
        correspondence_label=np.ones(n, dtype=np.int64),
        true_clean_flag=np.ones(n, dtype=np.int64),
        text_identity=identity.astype(np.int64).copy(),
        image_raw=image_feats[image_idx],
        text_raw=text_feats,
    )


def _identity_avoiding_permutation(identities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Return ``perm`` with ``identities[perm[p]] != identities[p]`` for every p.

    Items are laid out in randomly ordered identity blocks and every item takes
    the text of the item ``s`` positions ahead, ``s`` being the largest block.
    That is valid exactly when no identity holds more than half the items.
    """
    n = len(identities)
    uniq, counts = np.unique(identities, return_counts=True)
    s = counts.max()
    if 2 * s > n:
        raise NoiseInjectionError(
            f"cannot shuffle {n} texts without same-identity matches: "
            f"identity {uniq[counts.argmax()]} holds {s} of them"
        )
    group_rank = dict(zip(uniq.tolist(), rng.permutation(len(uniq)).tolist()))
    jitter = rng.permutation(n)
    order = np.lexsort((jitter, np.array([group_rank[v] for v in identities.tolist()])))
    perm = np.empty(n, dtype=np.int64)
    perm[order] = order[(np.arange(n) + s) % n]
    return perm


MAX_SELECTION_DRAWS = 100


def inject_noise(dataset: PairDataset, spec: NoiseSpec) -> PairDataset:
    n = len(dataset)
    if n == 0:
        raise NoiseInjectionError("dataset is empty")
    if not 0.0 <= spec.noise_rate <= 1.0:
        raise NoiseInjectionError(f"noise_rate must be in [0, 1], got {spec.noise_rate}")
    out = dataset.copy()
    n_noisy = int(np.floor(spec.noise_rate * n))
    if n_noisy == 0:
        return out
    rng = np.random.default_rng(spec.seed)
    # rejection sampling keeps the selection uniform over shufflable subsets
    for attempt in range(MAX_SELECTION_DRAWS):
        chosen = np.sort(rng.choice(n, size=n_noisy, replace=False))
        try:
            perm = _identity_avoiding_permutation(dataset.identity[chosen], rng)
            break
        except NoiseInjectionError:
            if attempt == MAX_SELECTION_DRAWS - 1:
                raise
    out.text_raw[chosen] = dataset.text_raw[chosen[perm]]
    out.text_identity[chosen] = dataset.text_identity[chosen[perm]]
    out.true_clean_flag[chosen] = 0
    out.meta["noise_rate"] = spec.noise_rate
    return out


def split_by_identity(dataset: PairDataset, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Partition by identity into (train, val, test); identities never straddle splits."""
    ids = np.unique(dataset.identity)
    rng = np.random.default_rng(seed)
    ids = rng.permutation(ids)
    n_val = max(1, int(round(fractions[1] * len(ids))))
    n_test = max(1, int(round(fractions[2] * len(ids))))
    if n_val + n_test >= len(ids):
        raise ConfigError(f"{len(ids)} identities are too few for a train/val/test split")
    test_ids = set(ids[:n_test].tolist())
    val_ids = set(ids[n_test:n_test + n_val].tolist())
    which = np.array([2 if v in test_ids else 1 if v in val_ids else 0 for v in dataset.identity.tolist()])
    return tuple(dataset.subset(np.flatnonzero(which == k)) for k in range(3))


# Record file: a tag line, then one tab-separated record per pair:
#   pair_id identity image_label correspondence_label true_clean_flag image_raw text_raw text_identity
# vector fields are space-separated shortest-repr floats, which round-trip exactly.

def _fmt_vec(v: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in v)


def save(dataset: PairDataset, path) -> None:
    lines = [f"# {FORMAT_TAG} raw_dim={dataset.raw_dim} n={len(dataset)}"]
    for k in range(len(dataset)):
        lines.append("\t".join([
            str(dataset.pair_id[k]),
            str(dataset.identity[k]),
            str(dataset.image_label[k]),
            str(dataset.correspondence_label[k]),
            str(dataset.true_clean_flag[k]),
            _fmt_vec(dataset.image_raw[k]),
            _fmt_vec(dataset.text_raw[k]),
            str(dataset.text_identity[k]),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> PairDataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(f"# {FORMAT_TAG}"):
        raise DataFormatError(f"{path}: missing '{FORMAT_TAG}' header")
    header = dict(tok.split("=") for tok in text[0].split()[3:])
    raw_dim = int(header["raw_dim"])
    cols = {k: [] for k in ("pid", "ident", "img", "corr", "clean", "tid")}
    image_raw, text_raw = [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 8:
            raise DataFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            for key, val in zip(("pid", "ident", "img", "corr", "clean"), parts[:5]):
                cols[key].append(int(val))
            cols["tid"].append(int(parts[7]))
            iv = [float(x) for x in parts[5].split()]
            tv = [float(x) for x in parts[6].split()]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        if len(iv) != raw_dim or len(tv) != raw_dim:
            raise DataFormatError(f"{path}:{lineno}: vector length differs from raw_dim={raw_dim}")
        image_raw.append(iv)
        text_raw.append(tv)
    as_int = lambda k: np.array(cols[k], dtype=np.int64)  # noqa: E731
    return PairDataset(
        pair_id=as_int("pid"),
        identity=as_int("ident"),
        image_label=as_int("img"),
        correspondence_label=as_int("corr"),
        true_clean_flag=as_int("clean"),
        text_identity=as_int("tid"),
        image_raw=np.array(image_raw, dtype=np.float64).reshape(-1, raw_dim),
        text_raw=np.array(text_raw, dtype=np.float64).reshape(-1, raw_dim),
    )

