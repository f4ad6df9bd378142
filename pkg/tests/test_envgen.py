import numpy as np
import pytest

from iib_lab import envgen


def scm_spec(**overrides):
    base = dict(
        d_causal=2,
        d_spurious=3,
        causal_mean_scale=1.0,
        causal_noise=0.5,
        env_spurious_means=((1.0, 1.0, 0.0), (1.0, -1.0, 0.0), (-2.0, 0.0, 0.0)),
    )
    base.update(overrides)
    return envgen.ScmSpec(**base)


class TestLinearScm:
    def test_noise_free_causal_channel_is_exact(self):
        spec = scm_spec(causal_noise=0.0)
        (ds,) = envgen.gen_linear_scm(spec, 500, [0], seed=1)
        z_c = ds.inputs[:, :2]
        y = ds.signed_labels()
        np.testing.assert_array_equal(z_c, np.repeat(y[:, None], 2, axis=1))
        # a sign readout of the causal block is a perfect classifier
        assert np.mean(np.sign(z_c[:, 0]) == y) == 1.0

    def test_determinism(self):
        spec = scm_spec()
        a = envgen.gen_linear_scm(spec, 1000, [0, 1], seed=42)
        b = envgen.gen_linear_scm(spec, 1000, [0, 1], seed=42)
        for da, db in zip(a, b):
            np.testing.assert_array_equal(da.inputs, db.inputs)
            np.testing.assert_array_equal(da.labels, db.labels)

    def test_env_index_out_of_range(self):
        with pytest.raises(envgen.GeneratorError, match="environment index"):
            envgen.gen_linear_scm(scm_spec(), 10, [3], seed=0)

    def test_pseudo_invariant_directions(self):
        # training means (1,1,0) and (1,-1,0): directions (1,0,0) and (0,0,1)
        # correlate with y identically in both training envs; a test env with
        # mean (-2,0,0) flips the first direction's correlation sign.
        spec = scm_spec()
        train0, train1, test = envgen.gen_linear_scm(spec, 50_000, [0, 1, 2], seed=7)

        def corr(ds, v):
            proj = ds.spurious @ v
            y = ds.signed_labels()
            return np.corrcoef(proj, y)[0, 1]

        for v in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])):
            c0, c1 = corr(train0, v), corr(train1, v)
            assert abs(c0 - c1) < 0.02
        c_test = corr(test, np.array([1.0, 0.0, 0.0]))
        assert corr(train0, np.array([1.0, 0.0, 0.0])) > 0.3
        assert c_test < -0.3

    def test_causal_law_is_environment_independent(self):
        spec = scm_spec()
        n = 20_000
        envs = envgen.gen_linear_scm(spec, n, [0, 1, 2], seed=3)
        means = []
        for ds in envs:
            y = ds.signed_labels()
            means.append(ds.inputs[y == 1, :2].mean(axis=0))
        bound = 3 * spec.causal_noise / np.sqrt(n / 2)
        for m in means[1:]:
            assert np.abs(m - means[0]).max() <= 2 * bound


class TestGeoskew:
    def test_majority_fraction(self):
        spec = envgen.SkewSpec(n_majority=950, n_minority=50, spurious_margin=1.0, invariant_dim=3)
        ds = envgen.gen_geoskew(spec, seed=0)
        assert ds.group.sum() == 950
        y = ds.signed_labels()
        assert np.mean(ds.spurious * y > 0) == pytest.approx(0.95)

    def test_balanced_groups_have_no_skew(self):
        spec = envgen.SkewSpec(n_majority=51, n_minority=50, spurious_margin=1.0, invariant_dim=2)
        ds = envgen.gen_geoskew(spec, seed=0)
        y = ds.signed_labels()
        assert np.mean(ds.spurious * y > 0) == pytest.approx(51 / 101)

    def test_zero_margin_spurious_column_is_constant(self):
        spec = envgen.SkewSpec(n_majority=100, n_minority=20, spurious_margin=0.0, invariant_dim=2)
        ds = envgen.gen_geoskew(spec, seed=0)
        np.testing.assert_array_equal(ds.inputs[:, -1], 0.0)

    def test_invariant_block_separates_everything(self):
        spec = envgen.canonical_skew_spec()
        ds = envgen.gen_geoskew(spec, seed=5)
        # recover the hidden direction from class-conditional means
        y = ds.signed_labels()
        x = ds.inputs[:, : spec.invariant_dim]
        direction = (x[y == 1].mean(axis=0) - x[y == -1].mean(axis=0))
        margins = y * (x @ direction)
        assert margins.min() > 0

    def test_spec_validation(self):
        with pytest.raises(envgen.GeneratorError):
            envgen.SkewSpec(n_majority=10, n_minority=10, spurious_margin=1.0, invariant_dim=2)


class TestColorShortcut:
    def test_full_correlation_color_equals_label(self):
        (ds,) = envgen.gen_color_shortcut([1.0], 500, seed=0)
        color_block = ds.inputs[:, -10:]
        np.testing.assert_array_equal(np.argmax(color_block, axis=1), ds.labels)
        # the color block alone is a linear one-hot readout of the label
        assert np.all(color_block.sum(axis=1) == 1.0)

    def test_random_color_has_no_label_information(self):
        (ds,) = envgen.gen_color_shortcut([0.0], 20_000, seed=1)
        color = ds.spurious.astype(np.int64)
        joint = np.zeros((10, 10))
        np.add.at(joint, (ds.labels, color), 1.0)
        joint /= joint.sum()
        from iib_lab.oracles import exact_mi

        # chi-square style bias bound for plug-in MI: (|A|-1)(|B|-1)/(2n)
        assert exact_mi(joint) < 81 / (2 * len(ds)) * 3 + 0.002

    def test_group_tags_match_color_agreement(self):
        (ds,) = envgen.gen_color_shortcut([0.9], 5000, seed=2)
        agree = (ds.spurious.astype(np.int64) == ds.labels).astype(np.uint8)
        np.testing.assert_array_equal(agree, ds.group)
        assert 0.88 <= ds.group.mean() <= 0.94

    def test_determinism(self):
        a = envgen.gen_color_shortcut([1.0, 0.9], 100, seed=11)
        b = envgen.gen_color_shortcut([1.0, 0.9], 100, seed=11)
        for da, db in zip(a, b):
            np.testing.assert_array_equal(da.inputs, db.inputs)

    def test_prototypes_shared_across_envs(self):
        envs = envgen.gen_color_shortcut([1.0, 0.0], 30_000, seed=3, content_noise=0.1)
        means = []
        for ds in envs:
            means.append(
                np.stack([ds.inputs[ds.labels == k, :20].mean(axis=0) for k in range(10)])
            )
        np.testing.assert_allclose(means[0], means[1], atol=0.05)


class TestLineConfigs:
    def test_eleven_rows_loaded(self):
        configs = envgen.load_line_configs()
        assert [c.index for c in configs] == list(range(11))

    def test_row_one_signs(self):
        configs = envgen.load_line_configs()
        assert configs[1].vertical_signs == (-1, 1, 1)
        assert configs[1].horizontal_sign == 1

    def test_flagged_duplicate_rows_are_identical(self):
        configs = envgen.load_line_configs()
        a, b = envgen.DUPLICATE_LINE_ROWS
        assert configs[a].signs == configs[b].signs
        # and they are the only duplicated pair
        sign_sets = [c.signs for c in configs]
        assert len(set(sign_sets)) == len(sign_sets) - 1


class TestCrossLines:
    def test_off_class_probability(self):
        train, _ = envgen.gen_cross_lines(400, p_diag=0.5, image_hw=8, seed=0, n_train_envs=1)
        ds = train[0]
        minority = ds.group == 0
        # each off-class configuration appears with probability (1 - p)/10
        for label in range(10):
            mask = (ds.labels == label) & minority
            if mask.sum() == 0:
                continue
            configs = ds.spurious[mask]
            assert not np.any(configs == label)
        frac_majority = ds.group.mean()
        n = len(ds)
        assert abs(frac_majority - 0.5) <= 3 * np.sqrt(0.25 / n) + 0.01

    def test_majority_fraction_tracks_p_diag(self):
        for p in (0.3, 0.8):
            train, _ = envgen.gen_cross_lines(300, p_diag=p, image_hw=8, seed=1, n_train_envs=1)
            ds = train[0]
            n = len(ds)
            assert abs(ds.group.mean() - p) <= 3 * np.sqrt(p * (1 - p) / n)

    def test_uniform_line_assignment_at_one_eleventh(self):
        train, _ = envgen.gen_cross_lines(1100, p_diag=1 / 11, image_hw=8, seed=2, n_train_envs=1)
        ds = train[0]
        counts = np.bincount(ds.spurious.astype(np.int64), minlength=11)
        expected = len(ds) / 11
        assert np.abs(counts - expected).max() <= 4 * np.sqrt(expected)

    def test_line_pixels_painted(self):
        train, test = envgen.gen_cross_lines(5, p_diag=1.0, image_hw=8, seed=3, n_train_envs=1)
        ds = train[0]
        imgs = ds.inputs.reshape(-1, 3, 8, 8)
        configs = envgen.load_line_configs()
        for img, label in zip(imgs, ds.labels):
            cfg = configs[label]
            for ch, sign in enumerate(cfg.vertical_signs):
                column = img[ch, :, 4]
                if ch == 0:
                    # the horizontal line is painted last and owns the crossing pixel
                    column = np.delete(column, 4)
                np.testing.assert_array_equal(column, 0.5 + 0.5 * sign)
            np.testing.assert_array_equal(img[0, 4, :], 0.5 + 0.5 * cfg.horizontal_sign)
        # test environment carries no painted lines: middle columns keep texture spread
        test_imgs = test.inputs.reshape(-1, 3, 8, 8)
        assert np.ptp(test_imgs[:, 0, :, 4]) > 0.2
        assert np.all(test.spurious == -1)

    def test_pixels_in_unit_interval(self):
        train, test = envgen.gen_cross_lines(20, p_diag=0.5, image_hw=8, seed=4)
        for ds in train + [test]:
            assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0

    def test_too_small_image_rejected(self):
        with pytest.raises(envgen.GeneratorError, match="too small"):
            envgen.gen_cross_lines(5, p_diag=0.5, image_hw=3, seed=0)


class TestVerticalLine:
    def test_pixel_formulas(self):
        ds = envgen.gen_vertical_line(4.0, 50, image_hw=8, seed=0)
        imgs = ds.inputs.reshape(-1, 3, 8, 8)
        # off-line pixel of value p maps to (p + 4)/9, so stays in [4/9, 5/9]
        off = np.delete(imgs[:, 2], 4, axis=2)
        assert off.min() >= 4.0 / 9.0 - 1e-12 and off.max() <= 5.0 / 9.0 + 1e-12
        # an on-line pixel of value 1 with B=4 maps to exactly 1
        line = imgs[:, 2, :, 4]
        assert line.max() <= 1.0 + 1e-12
        assert line.min() >= 8.0 / 9.0 - 1.0 / 9.0  # (0 + 4 + 4)/9

    def test_all_pixels_in_unit_interval(self):
        for b in (-4.0, -2.0, 0.0, 2.0, 4.0):
            ds = envgen.gen_vertical_line(b, 30, image_hw=8, seed=1)
            assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0

    def test_offset_out_of_range(self):
        with pytest.raises(envgen.GeneratorError, match="outside"):
            envgen.gen_vertical_line(4.5, 10, image_hw=8, seed=0)

    def test_textures_shared_across_offsets(self):
        a = envgen.gen_vertical_line(-4.0, 10, image_hw=8, seed=0, domain_index=0)
        b = envgen.gen_vertical_line(0.0, 10, image_hw=8, seed=9, domain_index=1)
        # first two channels are untouched by the offset; the class textures
        # underneath are identical constants of the class index
        ia = a.inputs.reshape(-1, 3, 8, 8)
        ib = b.inputs.reshape(-1, 3, 8, 8)
        ka = envgen.class_texture(int(a.labels[0]), 8)
        kb = envgen.class_texture(int(a.labels[0]), 8)
        np.testing.assert_array_equal(ka, kb)


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        spec = scm_spec()
        (ds,) = envgen.gen_linear_scm(spec, 64, [1], seed=9)
        path = tmp_path / "env.iibd"
        envgen.save_dataset(ds, path)
        back = envgen.load_dataset(path)
        np.testing.assert_array_equal(back.inputs, ds.inputs)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.group, ds.group)
        assert back.domain_index == 1
        assert back.n_classes == 2

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "bogus.iibd"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(envgen.GeneratorError, match="magic"):
            envgen.load_dataset(path)
