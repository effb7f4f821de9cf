import hashlib
import json
import os
import pathlib

RUNS_PATH = pathlib.Path(os.environ.get("DETADAPT_RUNS_PATH") or os.environ.get("OUTPUT_PATH") or "runs")
DATA_PATH = pathlib.Path(os.environ.get("DETADAPT_DATA_PATH") or "data")


def file_checksum(path: str | pathlib.Path) -> str:
    digest = hashlib.sha1()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_checksum(manifest_path: str | pathlib.Path) -> str:
    """sha1 over the manifest text and every image it references, in order."""
    manifest_path = pathlib.Path(manifest_path)
    digest = hashlib.sha1(manifest_path.read_bytes())
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            digest.update(file_checksum(manifest_path.parent / json.loads(line)["image"]).encode())
    return digest.hexdigest()


def load_json(path: str | pathlib.Path) -> dict:
    return json.loads(pathlib.Path(path).read_text(encoding="utf-8"))
