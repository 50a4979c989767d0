import io
import json
import pathlib
import tempfile
from unittest import TestCase, mock

import numpy as np

from detector import utils
from detector.utils import InputFormatError, ManifestError


class ProfileFormatTest(TestCase):
    def test_by_extension(self):
        self.assertEqual(utils.profile_format("perfis.ndjson"), "ndjson")
        self.assertEqual(utils.profile_format("perfis.jsonl"), "ndjson")
        self.assertEqual(utils.profile_format("perfis.csv"), "csv")
        self.assertEqual(utils.profile_format("-"), "csv")

    def test_explicit_format_wins(self):
        self.assertEqual(utils.profile_format("perfis.csv", "ndjson"), "ndjson")

    def test_unknown_format(self):
        with self.assertRaises(InputFormatError):
            utils.profile_format("perfis.csv", "xml")


class IterProfilesTest(TestCase):
    def rows(self, text, fmt="csv"):
        return list(utils.iter_profiles(io.StringIO(text), fmt))

    def test_csv_rows(self):
        rows = self.rows("1,2,3\n4,5,6\n")
        self.assertEqual([number for number, _ in rows], [1, 2])
        np.testing.assert_array_equal(rows[1][1], [4.0, 5.0, 6.0])

    def test_csv_header_is_skipped(self):
        rows = self.rows("y1,y2,y3\n1,2,3\n")
        self.assertEqual(len(rows), 1)
        self.assertEqual(rows[0][0], 2)

    def test_malformed_first_row_is_not_a_header(self):
        with self.assertRaises(InputFormatError) as exc_info:
            self.rows("1,x,3\n4,5,6\n")
        self.assertIn("Linha 1", str(exc_info.exception))

    def test_comment_lines_are_skipped(self):
        rows = self.rows("# manifest_digest=abc\ny1,y2\n1,2\n")
        self.assertEqual([number for number, _ in rows], [3])

    def test_header_only_at_top(self):
        with self.assertRaises(InputFormatError):
            self.rows("1,2\ny1,y2\n")

    def test_blank_lines_are_ignored(self):
        self.assertEqual(len(self.rows("1,2\n\n3,4\n")), 2)

    def test_malformed_row_reports_line(self):
        with self.assertRaises(InputFormatError) as exc_info:
            self.rows("1,2,3\n4,x,6\n")
        self.assertIn("Linha 2", str(exc_info.exception))

    def test_inconsistent_length(self):
        with self.assertRaises(InputFormatError) as exc_info:
            self.rows("1,2,3\n4,5\n")
        self.assertIn("Linha 2", str(exc_info.exception))

    def test_non_finite_values(self):
        with self.assertRaises(InputFormatError):
            self.rows("1,nan,3\n")

    def test_ndjson_rows(self):
        rows = self.rows('{"t": 1, "y": [1, 2]}\n{"y": [3, 4]}\n', "ndjson")
        np.testing.assert_array_equal(rows[1][1], [3.0, 4.0])

    def test_ndjson_without_responses(self):
        for text in ('{"t": 1}\n', "[1, 2\n", '{"y": [[1, 2]]}\n'):
            with self.subTest(text=text):
                with self.assertRaises(InputFormatError):
                    self.rows(text, "ndjson")

    def test_written_rows_are_read_back(self):
        Y = np.random.default_rng(0).normal(size=(3, 5))
        for fmt in ("csv", "ndjson"):
            with self.subTest(fmt=fmt):
                fp = io.StringIO()
                utils.write_profiles(fp, Y, fmt)
                read = [y for _, y in self.rows(fp.getvalue(), fmt)]
                np.testing.assert_array_equal(np.array(read), Y)

    def test_manifest_digest_is_embedded(self):
        Y = [[1.0, 2.0], [3.0, 4.0]]
        fp = io.StringIO()
        utils.write_profiles(fp, Y, "csv", manifest_digest="abc123")
        self.assertEqual(fp.getvalue().splitlines()[0], "# manifest_digest=abc123")
        np.testing.assert_array_equal([y for _, y in self.rows(fp.getvalue())], Y)

        fp = io.StringIO()
        utils.write_profiles(fp, Y, "ndjson", manifest_digest="abc123")
        records = [json.loads(line) for line in fp.getvalue().splitlines()]
        self.assertEqual([record["manifest_digest"] for record in records], ["abc123"] * 2)
        np.testing.assert_array_equal([y for _, y in self.rows(fp.getvalue(), "ndjson")], Y)

    def test_ndjson_time_index_start(self):
        fp = io.StringIO()
        utils.write_profiles(fp, [[1.0, 2.0], [3.0, 4.0]], "ndjson", start=-1)
        self.assertEqual(
            [json.loads(line)["t"] for line in fp.getvalue().splitlines()], [-1, 0]
        )

    def test_read_profiles_from_file(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = pathlib.Path(tmpdir) / "perfis.ndjson"
            path.write_text('{"y": [1, 2]}\n{"y": [2, 1]}\n')
            self.assertEqual(len(utils.read_profiles(path)), 2)

    def test_read_profiles_from_stdin(self):
        with mock.patch("sys.stdin", io.StringIO("1,2\n2,1\n")):
            self.assertEqual(len(utils.read_profiles("-")), 2)


class ManifestTest(TestCase):
    def test_digest_ignores_output_paths(self):
        manifest = {"command": "calibrate", "seed": 1, "output": "a.json"}
        self.assertEqual(
            utils.manifest_digest(manifest),
            utils.manifest_digest({**manifest, "output": "b.json", "manifest_out": "x"}),
        )

    def test_digest_changes_with_parameters(self):
        manifest = {"command": "calibrate", "seed": 1}
        self.assertNotEqual(
            utils.manifest_digest(manifest), utils.manifest_digest({**manifest, "seed": 2})
        )

    def test_echo(self):
        echo = utils.manifest_echo({"command": "report", "seed": 4})
        self.assertEqual(set(echo), {"manifest", "manifest_digest", "seed"})
        self.assertEqual(echo["seed"], 4)
        self.assertEqual(len(echo["manifest_digest"]), 16)

    def test_load_invalid_json(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = pathlib.Path(tmpdir) / "manifest.json"
            path.write_text("{")
            with self.assertRaises(ManifestError):
                utils.load_json(path)

    def test_dumps_is_stable(self):
        self.assertEqual(utils.dumps({"b": 1, "a": 2}), '{\n  "a": 2,\n  "b": 1\n}\n')


class ResolveSeedTest(TestCase):
    @mock.patch.dict("os.environ", {"EIGVCC_SEED": "50"})
    def test_flag_wins(self):
        self.assertEqual(utils.resolve_seed(7, 9), 7)

    @mock.patch.dict("os.environ", {"EIGVCC_SEED": "50"})
    def test_environment_over_manifest(self):
        self.assertEqual(utils.resolve_seed(None, 9), 50)

    @mock.patch.dict("os.environ", {"EIGVCC_SEED": ""})
    def test_manifest_seed(self):
        self.assertEqual(utils.resolve_seed(None, 9), 9)

    @mock.patch.dict("os.environ", {"EIGVCC_SEED": ""})
    def test_fresh_entropy(self):
        seed = utils.resolve_seed()
        self.assertIsInstance(seed, int)
        self.assertGreaterEqual(seed, 0)

    @mock.patch.dict("os.environ", {"EIGVCC_SEED": "abc"})
    def test_invalid_seed(self):
        with self.assertRaises(ManifestError):
            utils.resolve_seed()


class ParseOverridesTest(TestCase):
    def test_values_are_json(self):
        self.assertEqual(
            utils.parse_overrides(["tau=0", "snr=3.5", "convexity=convex", "L=null"]),
            {"tau": 0, "snr": 3.5, "convexity": "convex", "L": None},
        )

    def test_invalid_item(self):
        for item in ("tau", "=3"):
            with self.subTest(item=item):
                with self.assertRaises(ManifestError):
                    utils.parse_overrides([item])

    def test_int_list(self):
        self.assertEqual(utils.parse_int_list("1,2, 4,"), [1, 2, 4])
        with self.assertRaises(ManifestError):
            utils.parse_int_list("1,a")
