import os
import shutil
import tempfile
import unittest

import numpy as np
import pytest

from cloudfuse import detect
from cloudfuse.data import cloud_samples
from cloudfuse.detect import (
    CalibratedDetector,
    CalibrationParams,
    FineTuneConfig,
    FineTunedDetector,
    PlattFitter,
    ThresholdDetector,
    detect_calibrated,
    detect_threshold,
    finetune,
    fit_platt,
)
from cloudfuse.errors import CalibrationError, ConfigError, DatasetError, MissingFileError
from cloudfuse.evaluate import evaluate_detector
from cloudfuse.fusion import predict_quality
from cloudfuse.nn import QualityNet

from helpers import desk_run, random_stack


def logistic_sample(beta0, beta1, n, seed):
    rng = np.random.default_rng(seed)
    q = rng.random(n)
    p = 1.0 / (1.0 + np.exp(beta0 * q + beta1))
    return q, (rng.random(n) < p).astype(np.uint8)


class TestThreshold(unittest.TestCase):
    def test_boundary_is_clear(self):
        q = np.array([0.0, 0.49, 0.5, 0.51, 1.0])
        np.testing.assert_array_equal(detect_threshold(q), [1, 1, 0, 0, 0])
        np.testing.assert_array_equal(detect_threshold(q, tau=0.0), [0, 0, 0, 0, 0])
        np.testing.assert_array_equal(detect_threshold(q, tau=1.01), [1, 1, 1, 1, 1])


class TestCalibrationParams(unittest.TestCase):
    def test_probability(self):
        params = CalibrationParams(6.0, -3.0)
        self.assertAlmostEqual(float(params.probability(0.9)), 0.08317, places=5)
        self.assertAlmostEqual(float(params.probability(0.5)), 0.5)

    def test_matches_threshold_form(self):
        params = CalibrationParams(4.0, -1.2)
        q = np.linspace(0.0, 1.0, 1001)
        q = q[np.abs(q - 0.3) > 1e-9]
        np.testing.assert_array_equal(detect_calibrated(q, params), (q < 0.3).astype(np.uint8))

    def test_flat_parameters_are_all_clear(self):
        q = np.random.default_rng(0).random(100)
        self.assertEqual(detect_calibrated(q, CalibrationParams(0.0, 0.0)).sum(), 0)

    def test_non_finite(self):
        with self.assertRaises(CalibrationError):
            CalibrationParams(float("nan"), 0.0)
        with self.assertRaises(CalibrationError):
            CalibrationParams(1.0, float("inf"))

    def test_save_load(self):
        tmp = tempfile.mkdtemp()
        try:
            path = CalibrationParams(5.5, -2.25).save(os.path.join(tmp, "calibration.json"))
            self.assertEqual(CalibrationParams.load(path), CalibrationParams(5.5, -2.25))
            with self.assertRaises(MissingFileError):
                CalibrationParams.load(os.path.join(tmp, "absent.json"))
            bad = os.path.join(tmp, "bad.json")
            with open(bad, "w") as f:
                f.write('{"beta": 1}')
            with self.assertRaises(CalibrationError):
                CalibrationParams.load(bad)
        finally:
            shutil.rmtree(tmp)


class TestPlatt(unittest.TestCase):
    def test_recovers_parameters(self):
        q, y = logistic_sample(6.0, -3.0, 100000, seed=0)
        params = fit_platt(q, y)
        self.assertAlmostEqual(params.beta0, 6.0, delta=0.3)
        self.assertAlmostEqual(params.beta1, -3.0, delta=0.15)

    def test_log_likelihood_non_decreasing(self):
        q, y = logistic_sample(3.0, -1.0, 2000, seed=1)
        fitter = PlattFitter()
        fitter.fit(q, y)
        self.assertTrue(fitter.converged)
        steps = np.diff(fitter.log_likelihoods)
        self.assertTrue(np.all(steps >= 0), steps)

    def test_subsampling_is_seeded(self):
        q, y = logistic_sample(6.0, -3.0, 5000, seed=2)
        first = fit_platt(q, y, max_points=1000, seed=7)
        second = fit_platt(q, y, max_points=1000, seed=7)
        self.assertEqual(first, second)

    def test_single_class(self):
        q = np.random.default_rng(0).random(50)
        with self.assertRaises(CalibrationError):
            fit_platt(q, np.zeros(50))
        with self.assertRaises(CalibrationError):
            fit_platt(q, np.ones(50))

    def test_length_mismatch(self):
        with self.assertRaises(CalibrationError):
            PlattFitter().fit(np.zeros(4), np.zeros(5))

    def test_calibrate_needs_samples(self):
        with self.assertRaises(DatasetError):
            detect.calibrate(QualityNet(widths=(4, 8), seed=0), [])


class TestFineTune(unittest.TestCase):
    def setUp(self):
        self.net = QualityNet(widths=(4, 8), seed=0)
        self.samples = cloud_samples([random_stack(seed, k=2, size=8) for seed in range(3)])

    def test_only_head3_moves(self):
        config = FineTuneConfig(epochs=10, batch_size=2, max_steps=10, lr=1e-2)
        result = finetune(self.net, self.samples, config)
        original = dict(self.net.named_parameters())
        for name, p in result.partition.frozen.items():
            self.assertEqual(p.data.tobytes(), original[name].data.tobytes(), name)
        moved = [name for name, p in result.partition.trainable.items()
                 if p.data.tobytes() != original[name].data.tobytes()]
        self.assertIn("quality.head.weight", moved)
        self.assertIn("quality.dec0.conv2.weight", moved)

    def test_source_net_untouched(self):
        before = self.net.head.weight.data.copy()
        finetune(self.net, self.samples, FineTuneConfig(epochs=1, batch_size=2))
        np.testing.assert_array_equal(self.net.head.weight.data, before)

    def test_zero_learning_rate(self):
        result = finetune(self.net, self.samples, FineTuneConfig(epochs=2, lr=0.0))
        images = np.stack([image for image, _ in self.samples])
        np.testing.assert_array_equal(predict_quality(result.net, images),
                                      predict_quality(self.net, images))

    def test_max_steps(self):
        result = finetune(self.net, self.samples,
                          FineTuneConfig(epochs=50, batch_size=1, max_steps=8))
        # six samples per epoch, so the eighth step falls in epoch 2
        self.assertEqual([epoch for epoch, _ in result.losses], [1, 2])

    def test_validate(self):
        with self.assertRaises(ConfigError):
            finetune(self.net, self.samples, FineTuneConfig(epochs=0))
        with self.assertRaises(ConfigError):
            finetune(self.net, self.samples, FineTuneConfig(seed=-1))
        with self.assertRaises(DatasetError):
            finetune(self.net, [])

    def test_cloud_probability(self):
        out = np.array([0.2, 0.9])
        np.testing.assert_allclose(detect.cloud_probability(out), [0.8, 0.1])
        np.testing.assert_array_equal(detect.cloud_probability(out, output_is_cloud=True), out)


class TestDetectors(unittest.TestCase):
    def setUp(self):
        self.net = QualityNet(widths=(4, 8), seed=0)
        self.images = random_stack(0, k=3, size=8).images
        self.quality = predict_quality(self.net, self.images)

    def test_threshold_detector(self):
        np.testing.assert_array_equal(ThresholdDetector(self.net, tau=0.5).predict(self.images),
                                      (self.quality < 0.5).astype(np.uint8))

    def test_calibrated_detector(self):
        params = CalibrationParams(6.0, -3.0)
        np.testing.assert_array_equal(CalibratedDetector(self.net, params).predict(self.images),
                                      (params.probability(self.quality) > 0.5).astype(np.uint8))

    def test_finetuned_detector(self):
        detector = FineTunedDetector(self.net)
        np.testing.assert_array_equal(detector.predict(self.images),
                                      (1.0 - self.quality > 0.5).astype(np.uint8))
        flipped = FineTunedDetector(self.net, output_is_cloud=True)
        np.testing.assert_array_equal(flipped.predict(self.images),
                                      (self.quality > 0.5).astype(np.uint8))


@pytest.mark.slow
class TestDeskScaleDetectors(unittest.TestCase):
    def test_bootstrapped_detectors_order(self):
        run = desk_run()
        labelled = cloud_samples(run.labelled[:4])
        params = detect.calibrate(run.quality_net, labelled)
        tuned = finetune(run.quality_net, labelled, FineTuneConfig(epochs=50))
        threshold = evaluate_detector(ThresholdDetector(run.quality_net), run.held_out).pooled
        calibrated = evaluate_detector(CalibratedDetector(run.quality_net, params),
                                       run.held_out).pooled
        finetuned = evaluate_detector(FineTunedDetector(tuned.net), run.held_out).pooled
        self.assertLess(threshold.miou, calibrated.miou)
        self.assertLess(calibrated.miou, finetuned.miou)
        self.assertGreaterEqual(finetuned.miou, threshold.miou + 0.03)
