#!/usr/bin/env python3
"""
Set up the EncDec Lab environment.

Creates ./venv when missing (or when --force is given) and installs
requirements.txt into it. ``--check`` only reports which required packages
the current interpreter cannot import.

Author: Matt Y
License: MIT
Version: 1.0.0
"""

import argparse
import importlib.util
import os
import shutil
import subprocess
import sys

# requirement name -> import name
REQUIRED_IMPORTS = {
    "numpy": "numpy",
    "pandas": "pandas",
    "matplotlib": "matplotlib",
    "tqdm": "tqdm",
    "colorama": "colorama",
}


def missing_packages():
    """Required packages the running interpreter cannot import."""
    return [name for name, module in REQUIRED_IMPORTS.items() if importlib.util.find_spec(module) is None]


def venv_bin(venv_dir, program):
    folder = "Scripts" if os.name == "nt" else "bin"
    return os.path.join(venv_dir, folder, program)


def create_venv(venv_dir, force=False):
    if os.path.exists(venv_dir) and not force:
        return
    print("Setting up virtual environment...")
    if os.path.exists(venv_dir):
        shutil.rmtree(venv_dir)
    try:
        subprocess.run([sys.executable, "-m", "venv", venv_dir], check=True)
    except subprocess.CalledProcessError as e:
        print(f"Error creating virtual environment: {e}")
        sys.exit(1)


def install_requirements(venv_dir, requirements_file):
    pip_path = venv_bin(venv_dir, "pip")
    if not os.path.exists(pip_path):
        print(f"Error: Could not find pip at {pip_path}")
        sys.exit(1)
    if not os.path.exists(requirements_file):
        print(f"Error: Could not find requirements.txt at {requirements_file}")
        sys.exit(1)

    for label, cmd in (("Upgrading pip", [pip_path, "install", "--upgrade", "pip"]),
                       ("Installing dependencies", [pip_path, "install", "-r", requirements_file])):
        print(f"{label}...")
        try:
            subprocess.run(cmd, check=True)
        except subprocess.CalledProcessError as e:
            print(f"Error: {label.lower()} failed: {e}")
            sys.exit(1)


def main():
    parser = argparse.ArgumentParser(description="Install dependencies for EncDec Lab.")
    parser.add_argument("--force", action="store_true", help="Recreate the virtual environment")
    parser.add_argument("--check", action="store_true", help="Only report missing packages")
    args = parser.parse_args()

    if args.check:
        missing = missing_packages()
        if missing:
            print("Missing packages: " + ", ".join(missing))
            sys.exit(1)
        print("All required packages are importable.")
        return

    script_dir = os.path.dirname(os.path.abspath(__file__))
    venv_dir = os.path.join(script_dir, "venv")
    create_venv(venv_dir, args.force)
    install_requirements(venv_dir, os.path.join(script_dir, "requirements.txt"))
    print("Dependencies installed successfully.")


if __name__ == "__main__":
    main()
