"""The command-line pipeline end to end, then a replay from a manifest.

Every subcommand writes its artifacts plus a manifest.json recording the
argv, config, seed and artifact hashes.  Re-running the recorded argv
reproduces the artifacts byte for byte.

Run:  python demos/04_cli_walkthrough.py [workdir]
"""
import json
import subprocess
import sys
import tempfile
from pathlib import Path

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="outfitforge-"))


def run(*argv):
    cmd = [sys.executable, "-m", "outfitforge", *map(str, argv)]
    print("$ outfitforge", " ".join(map(str, argv)))
    res = subprocess.run(cmd, capture_output=True, text=True)
    if res.stdout.strip():
        print("  " + res.stdout.strip().replace("\n", "\n  "))
    if res.returncode:
        sys.exit(res.stderr)


d = root
run("synth", "--users", 60, "--items", 200, "--outfits", 400, "--image-dim", 16, "--text-dim", 8, "--cf-dim", 8,
    "--click-sharpness", 10, "--click-bias", -5, "--out", d / "data")
run("train-embed", "--data", d / "data", "--steps", 200, "--out", d / "embed")
run("train-fom", "--data", d / "data", "--embed", d / "embed/embed.ckpt", "--negatives", 16, "--epochs", 10,
    "--out", d / "fom")
run("eval-fitb", "--data", d / "data", "--embed", d / "embed/embed.ckpt", "--fom", d / "fom/fom.ckpt",
    "--out", d / "fitb")
run("eval-cp", "--data", d / "data", "--embed", d / "embed/embed.ckpt", "--fom", d / "fom/fom.ckpt",
    "--out", d / "cp")
run("train-pog", "--data", d / "data", "--embed", d / "embed/embed.ckpt", "--fom", d / "fom/fom.ckpt",
    "--negatives", 16, "--epochs", 5, "--out", d / "pog")
run("generate", "--data", d / "data", "--embed", d / "embed/embed.ckpt", "--pog", d / "pog/pog.ckpt",
    "--user", "u0", "--user", "u1", "--out", d / "gen")
print("  " + (d / "gen/generated.jsonl").read_text().strip().replace("\n", "\n  "))
# with 60 users and five epochs the generator is undertrained; expect CF to win here
run("simulate", "--world", d / "data/world.json", "--embed", d / "embed/embed.ckpt", "--pog", d / "pog/pog.ckpt",
    "--sessions", 2000, "--out", d / "sim")
run("gradcheck", "--out", d / "grad")

# replay the FOM training run from its manifest into a fresh directory
manifest = json.loads((d / "fom/manifest.json").read_text())
print("\nmanifest:", json.dumps({k: manifest[k] for k in ("command", "config_hash", "seed", "artifacts")}, indent=1))
run(*manifest["argv"], "--out", d / "fom-replay")
same = all((d / "fom" / n).read_bytes() == (d / "fom-replay" / n).read_bytes() for n in manifest["artifacts"])
print("replayed artifacts byte-identical:", same)
print("outputs in", root)
