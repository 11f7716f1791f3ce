import json

import numpy as np
import pytest

from errors import DataError, ErrorCode
from synthetic_data.dataset_store import (dataset_from_dict, dataset_to_dict, load_dataset,
                                          save_dataset)
from synthetic_data.generators import (Dataset, combine_domains, gen_domain_shift,
                                       gen_mixture_classification, gen_superclass_classification,
                                       generate, pack_centers)


class TestMixtureClassification:
    def test_single_context(self):
        ds = gen_mixture_classification(k=1, classes=3, n_per_context=30, dim=4, context_shift=5.0,
                                        class_margin=3.0)
        assert ds.n == 30
        np.testing.assert_array_equal(ds.context_labels, np.zeros(30))
        assert ds.k_true == 1 and ds.classes == 3

    def test_classes_separable_within_context(self):
        ds = gen_mixture_classification(k=2, classes=2, n_per_context=200, dim=2,
                                        context_shift=20.0, class_margin=4.0, seed=3)
        correct = 0
        for context in range(2):
            rows = ds.context_labels == context
            x, y = ds.features[rows], ds.class_labels[rows]
            means = np.stack([x[y == c].mean(axis=0) for c in range(2)])
            nearest = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
            correct += int(np.sum(nearest == y))
        assert correct / ds.n >= 0.95

    def test_contexts_add_variance(self):
        ds = gen_mixture_classification(k=4, classes=2, n_per_context=100, dim=3,
                                        context_shift=10.0, class_margin=2.0, seed=1)
        global_var = ds.features.var(axis=0).sum()
        for context in range(4):
            assert ds.features[ds.context_labels == context].var(axis=0).sum() < global_var

    def test_context_centers_are_separated(self):
        ds = gen_mixture_classification(k=3, classes=2, n_per_context=400, dim=2,
                                        context_shift=12.0, class_margin=1.0, seed=2)
        centers = np.stack([ds.features[ds.context_labels == c].mean(axis=0) for c in range(3)])
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.linalg.norm(centers[i] - centers[j]) >= 12.0 - 0.5

    def test_balanced_layout(self):
        ds = gen_mixture_classification(k=3, classes=4, n_per_context=20, dim=2, context_shift=8.0,
                                        class_margin=2.0)
        np.testing.assert_array_equal(np.bincount(ds.context_labels), [20, 20, 20])
        np.testing.assert_array_equal(np.bincount(ds.class_labels), [15, 15, 15, 15])

    def test_packing_failed(self):
        with pytest.raises(DataError) as info:
            gen_mixture_classification(k=5, classes=2, n_per_context=10, dim=2, context_shift=10.0,
                                       class_margin=1.0, half_width=1.0)
        assert info.value.code is ErrorCode.PACKING_FAILED

    def test_pack_centers_distance(self, rng):
        centers = pack_centers(6, 3, 4.0, rng)
        distances = np.linalg.norm(centers[:, None] - centers[None], axis=2)
        assert distances[~np.eye(6, dtype=bool)].min() >= 4.0

    @pytest.mark.parametrize("field,value", [("k", 0), ("context_shift", 0.0), ("class_margin", -1.0)])
    def test_invalid_arguments(self, field, value):
        params = dict(k=2, classes=2, n_per_context=10, dim=2, context_shift=5.0, class_margin=1.0)
        params[field] = value
        with pytest.raises(DataError) as info:
            gen_mixture_classification(**params)
        assert info.value.code is ErrorCode.INVALID_ARGUMENT

    def test_deterministic(self):
        params = dict(k=3, classes=2, n_per_context=25, dim=4, context_shift=6.0, class_margin=2.0)
        first = gen_mixture_classification(seed=11, **params)
        second = gen_mixture_classification(seed=11, **params)
        other = gen_mixture_classification(seed=12, **params)
        np.testing.assert_array_equal(first.features, second.features)
        assert not np.array_equal(first.features, other.features)


class TestDomainShift:
    def test_target_is_affine_image(self):
        source, target = gen_domain_shift(classes=2, n_source=4000, n_target=4000, dim=3,
                                          scale_shift=2.0, mean_shift=5.0, seed=4)
        np.testing.assert_allclose(target.features.mean(axis=0),
                                   2.0 * source.features.mean(axis=0) + 5.0, atol=0.3)
        np.testing.assert_allclose(target.features.std(axis=0) / source.features.std(axis=0),
                                   2.0, atol=0.15)
        np.testing.assert_array_equal(source.context_labels, 0)
        np.testing.assert_array_equal(target.context_labels, 1)

    def test_identity_shift(self):
        source, target = gen_domain_shift(classes=3, n_source=3000, n_target=3000, dim=2,
                                          scale_shift=1.0, mean_shift=0.0, seed=5)
        np.testing.assert_allclose(target.features.mean(axis=0), source.features.mean(axis=0),
                                   atol=0.2)

    def test_class_proportions_match(self):
        source, target = gen_domain_shift(classes=3, n_source=90, n_target=30, dim=2,
                                          scale_shift=1.5, mean_shift=-2.0)
        np.testing.assert_allclose(np.bincount(source.class_labels) / 90,
                                   np.bincount(target.class_labels) / 30)

    def test_combine_domains(self):
        source, target = gen_domain_shift(classes=2, n_source=10, n_target=6, dim=2,
                                          scale_shift=2.0, mean_shift=1.0)
        combined = combine_domains(source, target)
        assert combined.n == 16 and combined.k_true == 2
        assert combined.meta["n_source"] == 10
        np.testing.assert_array_equal(combined.context_labels, [0] * 10 + [1] * 6)
        np.testing.assert_array_equal(combined.features[10:], target.features)

    def test_generate_by_name(self):
        ds = generate("domain_shift", dict(classes=2, n_source=8, n_target=4, dim=2,
                                           scale_shift=2.0, mean_shift=1.0))
        assert ds.n == 12 and ds.meta["generator"] == "domain_shift"


def test_superclass_labels():
    ds = gen_superclass_classification(superclasses=3, classes_per_superclass=2, n_per_class=5,
                                       dim=4, superclass_shift=10.0, class_margin=2.0, seed=1)
    assert ds.n == 30 and ds.classes == 6 and ds.k_true == 3
    np.testing.assert_array_equal(ds.context_labels, ds.class_labels // 2)
    np.testing.assert_array_equal(np.bincount(ds.class_labels), [5] * 6)


def test_generate_rejects_unknown_generator_and_parameters():
    with pytest.raises(DataError) as info:
        generate("spirals", {})
    assert info.value.code is ErrorCode.INVALID_ARGUMENT
    with pytest.raises(DataError) as info:
        generate("mixture_classification", {"k": 2})
    assert info.value.code is ErrorCode.INVALID_ARGUMENT


def test_dataset_validation():
    with pytest.raises(DataError) as info:
        Dataset(features=np.zeros((3, 2)), class_labels=[0, 1])
    assert info.value.code is ErrorCode.SHAPE_MISMATCH
    with pytest.raises(DataError) as info:
        Dataset(features=np.zeros((2, 2)), class_labels=[0, 2], meta={"classes": 2})
    assert info.value.code is ErrorCode.BAD_LABEL
    ds = Dataset(features=np.arange(8.0).reshape(4, 2), class_labels=[0, 1, 0, 1],
                 context_labels=[1, 1, 0, 0])
    part = ds.subset([1, 2])
    np.testing.assert_array_equal(part.features, [[2.0, 3.0], [4.0, 5.0]])
    np.testing.assert_array_equal(part.context_labels, [1, 0])


class TestDatasetStore:
    def test_save_load_exact(self, tmp_path):
        ds = gen_mixture_classification(k=2, classes=3, n_per_context=12, dim=5, context_shift=7.0,
                                        class_margin=2.5, seed=8)
        path = save_dataset(ds, str(tmp_path / "nested" / "data.json"))
        loaded = load_dataset(path)
        np.testing.assert_array_equal(loaded.features, ds.features)
        np.testing.assert_array_equal(loaded.class_labels, ds.class_labels)
        np.testing.assert_array_equal(loaded.context_labels, ds.context_labels)
        assert loaded.meta == ds.meta

    def test_without_contexts(self, tmp_path):
        ds = Dataset(features=[[0.5, 1.5], [2.0, -1.0]], class_labels=[0, 1])
        loaded = load_dataset(save_dataset(ds, str(tmp_path / "plain.json")))
        assert loaded.context_labels is None

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "broken.json"
        ds = Dataset(features=[[0.5], [1.5]], class_labels=[0, 1])
        path.write_text(json.dumps(dataset_to_dict(ds))[:-10])
        with pytest.raises(DataError) as info:
            load_dataset(str(path))
        assert info.value.code is ErrorCode.PARSE_ERROR
        assert "line 1" in info.value.message

    def test_bad_version(self):
        payload = dataset_to_dict(Dataset(features=[[0.0]], class_labels=[0]))
        payload["version"] = 2
        with pytest.raises(DataError) as info:
            dataset_from_dict(payload)
        assert info.value.code is ErrorCode.BAD_VERSION

    def test_missing_field_and_bad_shape(self):
        payload = dataset_to_dict(Dataset(features=[[0.0, 1.0]], class_labels=[0]))
        del payload["class_labels"]
        with pytest.raises(DataError) as info:
            dataset_from_dict(payload)
        assert info.value.code is ErrorCode.PARSE_ERROR
        payload = dataset_to_dict(Dataset(features=[[0.0, 1.0]], class_labels=[0]))
        payload["dim"] = 3
        with pytest.raises(DataError) as info:
            dataset_from_dict(payload)
        assert info.value.code is ErrorCode.PARSE_ERROR

    def test_invalid_utf8(self, tmp_path):
        path = tmp_path / "binary.json"
        path.write_bytes(b'{"version": 1, "dim": \xff}')
        with pytest.raises(DataError) as info:
            load_dataset(str(path))
        assert info.value.code is ErrorCode.PARSE_ERROR
        assert "byte offset 22" in info.value.message

    @pytest.mark.parametrize("field", ["class_labels", "context_labels"])
    def test_fractional_labels_rejected(self, field):
        payload = dataset_to_dict(Dataset(features=[[0.0], [1.0]], class_labels=[0, 1],
                                          context_labels=[0, 1]))
        payload[field] = [0, 1.7]
        with pytest.raises(DataError) as info:
            dataset_from_dict(payload)
        assert info.value.code is ErrorCode.PARSE_ERROR
        assert f"{field}[1] = 1.7" in info.value.message

    def test_integral_float_labels_accepted(self):
        payload = dataset_to_dict(Dataset(features=[[0.0], [1.0]], class_labels=[0, 1]))
        payload["class_labels"] = [0.0, 1.0]
        np.testing.assert_array_equal(dataset_from_dict(payload).class_labels, [0, 1])
