import math
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from cloudfuse import tensor as T
from cloudfuse.errors import GraphError, LabelRangeError, ShapeError
from cloudfuse.gradcheck import check_gradients


SEEDS = range(20)
TOLERANCE = 1e-4


class GradientCheckMixin(object):
    def assertGradientsMatch(self, build, make_arrays):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            errors = check_gradients(build, make_arrays(rng))
            for i, error in enumerate(errors):
                self.assertLessEqual(
                    error, TOLERANCE, "input %d, seed %d: relative error %g" % (i, seed, error)
                )


class TestGradients(GradientCheckMixin, unittest.TestCase):
    def test_conv2d(self):
        def make(rng):
            return [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)),
                    rng.standard_normal(3)]

        self.assertGradientsMatch(lambda x, w, b: T.conv2d(x, w, b).sum(), make)

    def test_conv2d_padded_strided(self):
        weights = np.random.default_rng(99).standard_normal((2, 2, 4, 4))

        def make(rng):
            return [rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((2, 3, 3, 3)),
                    rng.standard_normal(2)]

        def build(x, w, b):
            return (T.conv2d(x, w, b, stride=2, padding=1) * weights).sum()

        self.assertGradientsMatch(build, make)

    def test_upsample_nearest2x(self):
        weights = np.random.default_rng(99).standard_normal((1, 2, 6, 8))
        self.assertGradientsMatch(
            lambda x: (T.upsample_nearest2x(x) * weights).sum(),
            lambda rng: [rng.standard_normal((1, 2, 3, 4))],
        )

    def test_max_pool2x(self):
        weights = np.random.default_rng(99).standard_normal((2, 2, 2, 3))
        self.assertGradientsMatch(
            lambda x: (T.max_pool2x(x) * weights).sum(),
            lambda rng: [rng.standard_normal((2, 2, 4, 6))],
        )

    def test_relu(self):
        weights = np.random.default_rng(99).standard_normal((3, 4))
        self.assertGradientsMatch(
            lambda x: (T.relu(x) * weights).sum(),
            lambda rng: [rng.standard_normal((3, 4))],
        )

    def test_sigmoid(self):
        weights = np.random.default_rng(99).standard_normal((2, 1, 4, 4))
        self.assertGradientsMatch(
            lambda x: (T.sigmoid(x) * weights).sum(),
            lambda rng: [rng.standard_normal((2, 1, 4, 4)) * 3],
        )

    def test_softmax(self):
        weights = np.random.default_rng(99).standard_normal((2, 4, 1, 3, 3))
        self.assertGradientsMatch(
            lambda x: (T.softmax(x, axis=1) * weights).sum(),
            lambda rng: [rng.standard_normal((2, 4, 1, 3, 3))],
        )

    def test_softmax_over_stack(self):
        weights = np.random.default_rng(99).standard_normal((3, 2, 4, 4))

        def build(*inputs):
            out = T.softmax_over_stack(inputs)
            total = out[0] * weights[0]
            for j in range(1, len(out)):
                total = total + out[j] * weights[j]
            return total.sum()

        self.assertGradientsMatch(
            build, lambda rng: [rng.uniform(0, 1, (2, 4, 4)) for _ in range(3)]
        )

    def test_cross_entropy(self):
        labels = np.random.default_rng(99).integers(0, 3, size=(2, 4, 4))
        self.assertGradientsMatch(
            lambda z: T.cross_entropy(z, labels),
            lambda rng: [rng.standard_normal((2, 3, 4, 4))],
        )

    def test_bce_loss(self):
        def make(rng):
            return [rng.uniform(0.05, 0.95, (2, 1, 4, 4))]

        target = (np.random.default_rng(99).random((2, 1, 4, 4)) > 0.5).astype(np.float64)
        self.assertGradientsMatch(lambda p: T.bce_loss(p, target), make)

    def test_dice_coefficient(self):
        target = (np.random.default_rng(99).random((2, 1, 4, 4)) > 0.5).astype(np.float64)
        self.assertGradientsMatch(
            lambda p: T.dice_coefficient(p, target),
            lambda rng: [rng.uniform(0, 1, (2, 1, 4, 4))],
        )

    def test_broadcast_arithmetic(self):
        weights = np.random.default_rng(99).standard_normal((2, 3, 4))

        def build(a, b):
            return ((a * b + a - b) * weights).sum()

        self.assertGradientsMatch(
            build, lambda rng: [rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 1))]
        )

    def test_structural_ops(self):
        weights = np.random.default_rng(99).standard_normal((2, 5, 2))

        def build(a, b):
            joined = T.concat([a, b], axis=1)
            stacked = T.stack([joined, joined * 2.0], axis=0)
            return (stacked[1].reshape(2, 5, 2) * weights).sum() + stacked.sum(axis=0).mean()

        self.assertGradientsMatch(
            build, lambda rng: [rng.standard_normal((2, 2, 2)), rng.standard_normal((2, 3, 2))]
        )


class TestOps(unittest.TestCase):
    def test_conv2d_ones(self):
        x = T.Tensor(np.ones((1, 1, 3, 3)))
        w = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, T.Tensor(np.zeros(1)))
        self.assertEqual(out.shape, (1, 1, 1, 1))
        self.assertEqual(out.item(), 9.0)

    def test_conv2d_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 5, 6))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        out = T.conv2d(T.Tensor(x), T.Tensor(kernel), padding=1)
        np.testing.assert_array_equal(out.data, x)

    def test_conv2d_output_size(self):
        x = T.Tensor(np.zeros((1, 2, 9, 7)))
        w = T.Tensor(np.zeros((4, 2, 3, 3)))
        self.assertEqual(T.conv2d(x, w, stride=2, padding=1).shape, (1, 4, 5, 4))

    def test_conv2d_channel_mismatch(self):
        x = T.Tensor(np.zeros((1, 3, 5, 5)))
        w = T.Tensor(np.zeros((4, 2, 3, 3)))
        with self.assertRaises(ShapeError) as cm:
            T.conv2d(x, w)
        self.assertIn("3 channels", str(cm.exception))

    def test_conv2d_even_kernel(self):
        with self.assertRaises(ShapeError):
            T.conv2d(T.Tensor(np.zeros((1, 1, 5, 5))), T.Tensor(np.zeros((1, 1, 2, 2))))

    def test_upsample_replicates(self):
        x = T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
        out = T.upsample_nearest2x(x)
        expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
        np.testing.assert_array_equal(out.data[0, 0], expected)
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))

    def test_softmax_over_stack_equal_inputs(self):
        inputs = [T.Tensor(np.full((2, 2), 0.3)) for _ in range(3)]
        for weight in T.softmax_over_stack(inputs):
            np.testing.assert_allclose(weight.data, 1.0 / 3)

    def test_softmax_over_stack_single(self):
        (weight,) = T.softmax_over_stack([T.Tensor(np.random.default_rng(0).random((3, 3)))])
        np.testing.assert_array_equal(weight.data, np.ones((3, 3)))

    def test_softmax_over_stack_pair(self):
        low, high = T.softmax_over_stack([T.Tensor(np.array([0.2])), T.Tensor(np.array([0.8]))])
        self.assertAlmostEqual(low.item(), 0.35434, delta=1e-5)
        self.assertAlmostEqual(high.item(), 0.64566, delta=1e-5)

    def test_softmax_over_stack_empty(self):
        with self.assertRaises(ShapeError):
            T.softmax_over_stack([])

    def test_cross_entropy_uniform(self):
        for n_classes in range(2, 11):
            logits = T.Tensor(np.zeros((1, n_classes, 3, 3)))
            labels = np.random.default_rng(n_classes).integers(0, n_classes, (1, 3, 3))
            self.assertAlmostEqual(T.cross_entropy(logits, labels).item(), math.log(n_classes),
                                   delta=1e-6)

    def test_cross_entropy_confident(self):
        labels = np.array([[[0, 1], [1, 0]]])
        logits = np.zeros((1, 2, 2, 2))
        logits[0, 0][labels[0] == 0] = 50.0
        logits[0, 1][labels[0] == 1] = 50.0
        self.assertLess(T.cross_entropy(T.Tensor(logits), labels).item(), 1e-12)

    def test_cross_entropy_label_range(self):
        labels = np.zeros((1, 3, 3), dtype=np.int64)
        labels[0, 2, 1] = 6
        with self.assertRaises(LabelRangeError) as cm:
            T.cross_entropy(T.Tensor(np.zeros((1, 6, 3, 3))), labels)
        self.assertEqual(cm.exception.coordinate, (0, 2, 1))
        self.assertIn("(0, 2, 1)", str(cm.exception))

    def test_bce_half(self):
        loss = T.bce_loss(T.Tensor(np.full((4, 4), 0.5)), np.random.default_rng(0).random((4, 4)))
        self.assertAlmostEqual(loss.item(), 0.69315, delta=1e-5)

    def test_bce_perfect(self):
        target = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(np.float64)
        self.assertLess(T.bce_loss(T.Tensor(target.copy()), target).item(), 1e-6)

    def test_dice_perfect(self):
        mask = np.zeros((10, 10))
        mask[2:5, 3:7] = 1
        self.assertAlmostEqual(T.dice_coefficient(T.Tensor(mask), mask).item(), 1.0)

    def test_dice_disjoint(self):
        pred = np.zeros((20, 20))
        target = np.zeros((20, 20))
        pred[:5] = 1
        target[10:15] = 1
        value = T.dice_coefficient(T.Tensor(pred), target).item()
        self.assertAlmostEqual(value, 1.0 / 201, places=10)
        self.assertAlmostEqual(value, 0.00498, delta=1e-5)

    def test_dice_empty(self):
        zeros = np.zeros((4, 4))
        self.assertEqual(T.dice_coefficient(T.Tensor(zeros), zeros).item(), 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 0.95))
    def test_dice_symmetric(self, seed, density):
        rng = np.random.default_rng(seed)
        a = (rng.random((6, 6)) < density).astype(np.float64)
        b = (rng.random((6, 6)) < density).astype(np.float64)
        self.assertEqual(T.dice_coefficient(T.Tensor(a), b).item(),
                         T.dice_coefficient(T.Tensor(b), a).item())

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
    def test_softmax_over_stack_normalised(self, k, seed):
        rng = np.random.default_rng(seed)
        weights = T.softmax_over_stack([T.Tensor(rng.random((4, 5))) for _ in range(k)])
        total = sum(w.data for w in weights)
        np.testing.assert_allclose(total, 1.0, atol=1e-6)


class TestGraph(unittest.TestCase):
    def test_backward_populates_grads(self):
        a = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = T.Tensor(np.array([3.0, 4.0]), requires_grad=True)
        (a * b + a).sum().backward()
        np.testing.assert_array_equal(a.grad, [4.0, 5.0])
        np.testing.assert_array_equal(b.grad, [1.0, 2.0])

    def test_topological_order(self):
        a = T.Tensor(np.ones(3), requires_grad=True)
        hidden = T.relu(a * 2.0)
        root = (hidden * hidden).sum()
        graph = T.GradientGraph(root)
        position = dict((id(t), i) for i, t in enumerate(graph.tensors))
        for tensor in graph.tensors:
            if tensor._node is None:
                continue
            for inp in tensor._node.inputs:
                if inp.requires_grad:
                    self.assertLess(position[id(inp)], position[id(tensor)])

    def test_second_backward_rejected(self):
        a = T.Tensor(np.ones(3), requires_grad=True)
        loss = (a * a).sum()
        loss.backward()
        with self.assertRaises(GraphError):
            loss.backward()

    def test_non_scalar_root_rejected(self):
        a = T.Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(GraphError):
            (a * 2.0).backward()

    def test_no_grad(self):
        a = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            out = (a * 2.0).sum()
        self.assertFalse(out.requires_grad)
        self.assertTrue(T.is_grad_enabled())

    def test_integer_data_promoted(self):
        self.assertEqual(T.Tensor([1, 2, 3]).dtype, np.float32)
        self.assertEqual(T.Tensor(np.zeros(2)).dtype, np.float64)
