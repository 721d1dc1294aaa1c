import os
import shutil
import tempfile
import unittest

import mock

from helpers import RECORD_GOLDEN_ENV, check_golden


class TestCheckGolden(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_missing_file_fails(self):
        with mock.patch.dict(os.environ):
            os.environ.pop(RECORD_GOLDEN_ENV, None)
            with self.assertRaises(self.failureException) as cm:
                check_golden(self, "out.bin", b"abc", golden_dir=self.tmp)
        self.assertIn("tox -e golden", str(cm.exception))
        self.assertFalse(os.path.exists(os.path.join(self.tmp, "out.bin")))

    def test_record(self):
        with mock.patch.dict(os.environ, {RECORD_GOLDEN_ENV: "1"}):
            check_golden(self, "out.bin", b"abc", golden_dir=self.tmp)
        with open(os.path.join(self.tmp, "out.bin"), "rb") as f:
            self.assertEqual(f.read(), b"abc")

    def test_compare(self):
        with open(os.path.join(self.tmp, "out.bin"), "wb") as f:
            f.write(b"abc")
        check_golden(self, "out.bin", b"abc", golden_dir=self.tmp)
        with self.assertRaises(self.failureException):
            check_golden(self, "out.bin", b"abd", golden_dir=self.tmp)
