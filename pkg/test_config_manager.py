import json
import os
import shutil
import tempfile
import unittest
from unittest import mock

from config_manager import ConfigManager, DEFAULTS


class TestConfigManager(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.config_path = os.path.join(self.tmp, "config.json")
        self.env = mock.patch.dict(os.environ, {}, clear=False)
        self.env.start()
        for name in ("CAMERA_SEED", "CAMERA_THREADS", "CAMERA_CONFIG"):
            os.environ.pop(name, None)

    def tearDown(self):
        self.env.stop()
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_priority_order(self):
        manager = ConfigManager(self.config_path)
        self.assertEqual(manager.get("seed"), 0)
        self.assertEqual(manager.get_source("seed"), "default")

        self.assertTrue(ConfigManager(self.config_path).save({"seed": 5}))
        manager = ConfigManager(self.config_path)
        self.assertEqual(manager.get("seed"), 5)
        self.assertEqual(manager.get_source("seed"), "stored")

        os.environ["CAMERA_SEED"] = "9"
        self.assertEqual(manager.get("seed"), 9)
        self.assertEqual(manager.get_source("seed"), "environment")

        self.assertEqual(manager.get("seed", 3), 3)
        self.assertEqual(manager.get_source("seed", 3), "cli")

    def test_unknown_key(self):
        manager = ConfigManager(self.config_path)
        with self.assertRaises(KeyError):
            manager.get("output_dir")
        self.assertEqual(manager.get_source("output_dir"), "none")
        self.assertFalse(manager.save({"output_dir": "x"}))

    def test_coercion(self):
        with open(self.config_path, "w") as f:
            json.dump({"threads": 4.0, "ratios": [0.1, 0.8, 0.1], "group_size": "64"}, f)
        manager = ConfigManager(self.config_path)
        self.assertEqual(manager.get("threads"), 4)
        self.assertEqual(manager.get("ratios"), "0.1,0.8,0.1")
        self.assertEqual(manager.get("group_size"), 64)

    def test_invalid_values(self):
        os.environ["CAMERA_THREADS"] = "many"
        with self.assertRaises(ValueError):
            ConfigManager(self.config_path).get("threads")
        self.assertFalse(ConfigManager(self.config_path).save({"seed": 1.5}))

    def test_unreadable_file_falls_back_to_defaults(self):
        with open(self.config_path, "w") as f:
            f.write("{not json")
        self.assertEqual(ConfigManager(self.config_path).get("lambda"), DEFAULTS["lambda"])
        with open(self.config_path, "w") as f:
            json.dump([1, 2], f)
        self.assertEqual(ConfigManager(self.config_path).get("variant"), "q")

    def test_config_path_from_environment(self):
        other = os.path.join(self.tmp, "nested", "other.json")
        os.environ["CAMERA_CONFIG"] = other
        manager = ConfigManager()
        self.assertTrue(manager.save({"variant": "q-dagger"}))
        self.assertTrue(os.path.exists(other))
        with open(other) as f:
            stored = json.load(f)
        self.assertEqual(stored["variant"], "q-dagger")
        self.assertIn("updated_at", stored)


if __name__ == '__main__':
    unittest.main()
