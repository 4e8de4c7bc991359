import numpy as np
import pytest

from cosreid.data import Dataset, Domain, ImageRecord, ToyConfig, generate_toy_dataset


@pytest.fixture(scope="session")
def toy_dataset() -> Dataset:
    """Small full-body toy set shared by read-only tests."""
    return generate_toy_dataset(
        ToyConfig(n_identities=4, images_per_identity=5, image_size=64, figure_palette_seed=7), seed=7
    )


def make_record(
    height: int = 32,
    width: int = 32,
    identity: int = 0,
    obc: int = 0,
    seed: int = 0,
    domain: Domain = Domain.FULL_BODY,
) -> ImageRecord:
    rng = np.random.default_rng(seed)
    mask = np.zeros((height, width), dtype=np.float32)
    mask[height // 4 : 3 * height // 4, width // 4 : 3 * width // 4] = 1.0
    return ImageRecord(
        image=rng.uniform(0, 1, size=(height, width, 3)).astype(np.float32),
        identity=identity,
        mask=mask,
        obc=obc,
        domain=domain,
        source_id=f"synthetic-{identity}-{seed}",
    )
