import numpy as np
import pytest

from conceptprobe import bottleneck, cav, store, synth


def small_spec(seed: int = 3) -> synth.SynthSpec:
    """A fast synthetic spec for unit tests (not the desk-scale acceptance spec)."""
    return synth.SynthSpec(
        num_classes=4,
        num_concepts=6,
        depth=8,
        feature_height=5,
        feature_width=5,
        image_height=40,
        image_width=40,
        noise_sigma=0.1,
        amplitude=6.0,
        samples_per_class=12,
        seed=seed,
    )


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small") / "data"
    synth.generate(small_spec(), root)
    return root


@pytest.fixture(scope="session")
def small_dataset(small_dataset_dir):
    return store.Dataset.open(small_dataset_dir)


@pytest.fixture(scope="session")
def small_bank(small_dataset):
    return cav.build_bank(small_dataset, n_pos=15, n_neg=18, lam=1.0, seed=0, epochs=300)


@pytest.fixture(scope="session")
def small_model(small_dataset, small_bank):
    train_ids = small_dataset.image_ids("train")
    features = bottleneck.project_batch(small_bank, small_dataset.post_gap_matrix(train_ids))
    labels = np.array(
        [small_dataset.manifest.images[i].class_label for i in train_ids]
    )
    return bottleneck.train_classifier(
        features, labels, small_dataset.manifest.num_classes
    )
