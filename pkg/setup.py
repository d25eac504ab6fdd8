#!/usr/bin/env python3
"""
Setup script for the Bregman divergence learner
Run: python setup.py
"""

import os
import platform
import subprocess
import sys


def check_python_version():
    """Check Python version"""
    print("Checking Python version...")
    if sys.version_info < (3, 9):
        print("Python 3.9 or higher is required")
        sys.exit(1)
    print(f"Python {sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}")


def create_virtual_env():
    """Create virtual environment"""
    print("\nCreating virtual environment...")
    if not os.path.exists("venv"):
        subprocess.run([sys.executable, "-m", "venv", "venv"], check=True)
        print("Virtual environment created")
    else:
        print("Virtual environment already exists")


def install_dependencies(dev: bool = False):
    """Install required packages"""
    print("\nInstalling dependencies...")
    if platform.system() == "Windows":
        pip_path = os.path.join("venv", "Scripts", "pip")
    else:
        pip_path = os.path.join("venv", "bin", "pip")

    files = ["requirements.txt"] + (["requirements-dev.txt"] if dev else [])
    for name in files:
        subprocess.run([pip_path, "install", "-r", name], check=True)
    print("Dependencies installed")


def setup_environment():
    """Create .env from the example file"""
    print("\nSetting up environment...")
    if not os.path.exists(".env"):
        with open(".env.example", "r") as f:
            example = f.read()
        with open(".env", "w") as f:
            f.write(example)
        print("Created .env file from example")
    else:
        print(".env file already exists")


def create_directories():
    """Create the default output directory"""
    directory = os.getenv("PBDL_OUTPUT_DIR", "runs")
    os.makedirs(directory, exist_ok=True)
    print(f"  Created: {directory}")


def print_next_steps():
    print(
        """
    Setup complete.

    Try:
      $ python run.py bounds --beta 2 --R 1 --K 4 --d 1
      $ python run.py train --data data/examples/toy_separable.csv --lambda 1e-4 --triplets 50
      $ python run.py eval --data iris --repeats 3 --lambda 1e-4
      $ python -m pytest
    """
    )


def main():
    """Main setup function"""
    check_python_version()
    create_virtual_env()
    install_dependencies(dev="--dev" in sys.argv)
    setup_environment()
    create_directories()
    print_next_steps()


if __name__ == "__main__":
    main()
