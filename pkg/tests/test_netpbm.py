import os
import shutil
import tempfile
import unittest

import numpy as np

from cloudfuse import netpbm
from cloudfuse.errors import MissingFileError, NetPBMFormatError


class TestNetPBM(unittest.TestCase):
    def test_p5(self):
        array = np.arange(12, dtype=np.uint8).reshape(3, 4)
        blob = netpbm.encode(array)
        self.assertTrue(blob.startswith(b"P5\n4 3\n255\n"))
        np.testing.assert_array_equal(netpbm.decode(blob), array)

    def test_p6(self):
        array = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
        blob = netpbm.encode(array)
        self.assertTrue(blob.startswith(b"P6\n7 5\n255\n"))
        np.testing.assert_array_equal(netpbm.decode(blob), array)

    def test_header_comments(self):
        blob = b"P5\n# made by hand\n2 1\n# maxval next\n255\n\x07\x09"
        np.testing.assert_array_equal(netpbm.decode(blob), [[7, 9]])

    def test_unsupported_magic(self):
        with self.assertRaises(NetPBMFormatError) as cm:
            netpbm.decode(b"P2\n1 1\n255\n0", path="image.pgm")
        self.assertEqual(cm.exception.path, "image.pgm")

    def test_maxval(self):
        with self.assertRaises(NetPBMFormatError):
            netpbm.decode(b"P5\n1 1\n65535\n\x00\x00")

    def test_truncated_raster(self):
        with self.assertRaises(NetPBMFormatError):
            netpbm.decode(b"P6\n2 2\n255\n\x00\x00\x00")

    def test_truncated_header(self):
        with self.assertRaises(NetPBMFormatError):
            netpbm.decode(b"P5\n2")

    def test_rejects_wrong_dtype(self):
        with self.assertRaises(ValueError):
            netpbm.encode(np.zeros((2, 2), dtype=np.float32))

    def test_to_bytes01(self):
        np.testing.assert_array_equal(netpbm.to_bytes01([-1.0, 0.0, 0.5, 1.0, 2.0]),
                                      [0, 0, 128, 255, 255])

    def test_files(self):
        tmp = tempfile.mkdtemp()
        try:
            path = os.path.join(tmp, "mask.pgm")
            mask = (np.eye(4) * 255).astype(np.uint8)
            netpbm.write(path, mask)
            np.testing.assert_array_equal(netpbm.read(path), mask)
            with self.assertRaises(MissingFileError):
                netpbm.read(os.path.join(tmp, "absent.pgm"))
            with self.assertRaises(OSError) as cm:
                netpbm.write(os.path.join(tmp, "no", "such", "dir.pgm"), mask)
            self.assertIn("dir.pgm", str(cm.exception))
        finally:
            shutil.rmtree(tmp)
