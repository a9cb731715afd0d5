import numpy as np
import pytest

from milgraph.bags import build_spatial_graph
from milgraph.data import (DatasetManifest, FormatError, SyntheticSpec,
                           apply_standardizer, fit_standardizer,
                           generate_synthetic, load_bag_csv, load_gridded_csv,
                           write_bag_csv)
from conftest import make_bag


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadBagCsv:
    def test_minimal_file(self, tmp_path):
        path = write(tmp_path, "bag_id,label,f0,f1,f2\n"
                               "a,1,0.5,1.0,2.0\n"
                               "a,1,0.25,2.0,4.0\n")
        bags, manifest = load_bag_csv(path)
        assert len(bags) == 1
        assert bags[0].size == 2
        assert bags[0].feature_dim == 3
        assert manifest.num_bags == 1
        assert manifest.num_instances == 2
        assert manifest.feature_dim == 3
        assert not manifest.has_grid

    def test_inconsistent_label_names_bag(self, tmp_path):
        path = write(tmp_path, "bag_id,label,f0\n"
                               "a,1,0.5\n"
                               "a,0,0.25\n")
        with pytest.raises(FormatError, match="'a'"):
            load_bag_csv(path)

    def test_ragged_row_names_line(self, tmp_path):
        path = write(tmp_path, "bag_id,label,f0,f1\n"
                               "a,1,0.5,1.0\n"
                               "a,1,0.25\n")
        with pytest.raises(FormatError, match=":3"):
            load_bag_csv(path)

    def test_non_contiguous_bag_rejected(self, tmp_path):
        path = write(tmp_path, "bag_id,label,f0\n"
                               "a,1,0.5\nb,0,0.1\na,1,0.2\n")
        with pytest.raises(FormatError, match="contiguous"):
            load_bag_csv(path)

    def test_bad_header_rejected(self, tmp_path):
        path = write(tmp_path, "id,label,f0\na,1,0.5\n")
        with pytest.raises(FormatError, match="header"):
            load_bag_csv(path)

    def test_manifest_counts(self, tmp_path):
        bags = generate_synthetic(SyntheticSpec(num_bags=10, seed=3))
        path = tmp_path / "synth.csv"
        write_bag_csv(path, bags)
        loaded, manifest = load_bag_csv(path)
        assert manifest.num_bags == 10
        assert manifest.num_instances == sum(b.size for b in bags)
        assert manifest.bags_per_class == (
            sum(b.label == 0 for b in bags), sum(b.label == 1 for b in bags))


class TestLoadGriddedCsv:
    def test_2x2_grid_bag(self, tmp_path):
        lines = ["bag_id,label,f0,row,col"]
        for r in range(2):
            for c in range(2):
                lines.append(f"g,1,0.5,{r},{c}")
        path = write(tmp_path, "\n".join(lines) + "\n")
        bags = load_gridded_csv(path)
        assert bags[0].size == 4
        graph = build_spatial_graph(bags[0])
        assert np.array_equal(graph.degrees, np.full(4, 4.0))

    def test_missing_col_column(self, tmp_path):
        path = write(tmp_path, "bag_id,label,f0,row\na,1,0.5,0\n")
        with pytest.raises(FormatError):
            load_gridded_csv(path)

    def test_plain_csv_rejected(self, tmp_path):
        path = write(tmp_path, "bag_id,label,f0\na,1,0.5\n")
        with pytest.raises(FormatError, match="row,col"):
            load_gridded_csv(path)

    def test_duplicate_grid_pos_rejected(self, tmp_path):
        path = write(tmp_path, "bag_id,label,f0,row,col\n"
                               "a,1,0.5,0,0\na,1,0.6,0,0\n")
        with pytest.raises(FormatError, match="duplicate"):
            load_gridded_csv(path)

    def test_single_patch_bag(self, tmp_path):
        path = write(tmp_path, "bag_id,label,f0,row,col\na,1,0.5,0,0\n")
        bags = load_gridded_csv(path)
        assert build_spatial_graph(bags[0]).degrees[0] == 1.0


class TestRoundTrip:
    @pytest.mark.parametrize("gridded", [False, True])
    def test_write_then_load_is_exact(self, tmp_path, rng, gridded):
        bags = [make_bag(rng, gridded=gridded, bag_id=f"bag{i}") for i in range(5)]
        path = tmp_path / "round.csv"
        write_bag_csv(path, bags)
        loaded = (load_gridded_csv(path) if gridded
                  else load_bag_csv(path)[0])
        assert len(loaded) == len(bags)
        for a, b in zip(bags, loaded):
            assert a.id == b.id and a.label == b.label
            assert np.array_equal(a.feature_matrix(), b.feature_matrix())
            if gridded:
                assert all(x.grid_pos == y.grid_pos
                           for x, y in zip(a.instances, b.instances))


class TestSyntheticGenerator:
    def test_all_negative_when_fraction_tiny(self):
        # fraction must stay in (0,1); the smallest admissible fraction on
        # few bags rounds to zero positives
        bags = generate_synthetic(SyntheticSpec(num_bags=10, seed=2,
                                                positive_fraction=0.01))
        assert all(b.label == 0 for b in bags)

    def test_positive_bags_contain_planted_instance(self):
        spec = SyntheticSpec(num_bags=40, seed=7)
        center = np.full(spec.feature_dim, spec.positive_center)
        for bag in generate_synthetic(spec):
            dists = np.linalg.norm(bag.feature_matrix() - center, axis=1)
            if bag.label == 1:
                assert np.any(dists < spec.positive_radius)
            else:
                assert np.all(dists >= spec.positive_radius)

    def test_deterministic(self):
        spec = SyntheticSpec(num_bags=15, seed=9)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert x.label == y.label
            assert np.array_equal(x.feature_matrix(), y.feature_matrix())

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(positive_radius=0.0)
        with pytest.raises(ValueError):
            SyntheticSpec(positive_fraction=0.0)


class TestStandardizer:
    def test_zscore_on_fit_set(self, rng):
        bags = [make_bag(rng, bag_id=f"b{i}") for i in range(6)]
        mean, std = fit_standardizer(bags)
        transformed = apply_standardizer(bags, mean, std)
        feats = np.concatenate([b.feature_matrix() for b in transformed])
        assert np.allclose(feats.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(feats.std(axis=0), 1.0, atol=1e-12)

    def test_constant_feature_handled(self, rng):
        bags = [make_bag(rng, bag_id=f"b{i}") for i in range(3)]
        flat = [type(b)(id=b.id, label=b.label, instances=tuple(
            type(i)(features=np.append(i.features[:-1], 5.0))
            for i in b.instances)) for b in bags]
        mean, std = fit_standardizer(flat)
        assert std[-1] == 1.0
        transformed = apply_standardizer(flat, mean, std)
        feats = np.concatenate([b.feature_matrix() for b in transformed])
        assert np.allclose(feats[:, -1], 0.0)
