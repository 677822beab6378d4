#!/usr/bin/env python3
"""
Crossreg Setup Script

This script automates the setup of the cross-source registration toolkit:
dependency installation, the .env file, output directories, the optional
results store and the convenience start scripts.
"""

import os
import sys
import subprocess
import shutil
from pathlib import Path

APP_DIR = Path("crossreg")


def run_command(command, cwd=None, shell=True):
    """
    Execute a shell command and handle errors.

    Args:
        command: Command to execute
        cwd: Working directory
        shell: Whether to use shell

    Returns:
        bool: True if command succeeded, False otherwise
    """
    try:
        print(f"Running: {command}")
        subprocess.run(
            command,
            shell=shell,
            cwd=cwd,
            capture_output=True,
            text=True,
            check=True
        )
        print(f"✅ Success: {command}")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ Error running {command}: {e}")
        print(f"Output: {e.output}")
        print(f"Error: {e.stderr}")
        return False


def check_prerequisites():
    """
    Check if all required tools are installed.

    Returns:
        bool: True if all prerequisites are met
    """
    print("🔍 Checking prerequisites...")

    if sys.version_info < (3, 9):
        print("❌ Python 3.9+ is required")
        return False
    print(f"✅ Python {sys.version_info.major}.{sys.version_info.minor}")

    if not shutil.which("pip"):
        print("❌ pip is not installed")
        return False
    print("✅ pip is available")

    return True


def setup_application():
    """
    Install dependencies and prepare the working directories.

    Returns:
        bool: True if setup succeeded
    """
    print("\n🐍 Setting up crossreg...")

    if not APP_DIR.exists():
        print("❌ Application directory not found")
        return False

    if not run_command(f"{sys.executable} -m pip install -r requirements.txt", cwd=APP_DIR):
        print("❌ Failed to install Python dependencies")
        return False

    env_file = APP_DIR / ".env"
    if not env_file.exists():
        env_content = """# Crossreg Environment Configuration
# Results store; leave empty to keep runs only on disk
CROSSREG_DATABASE_URL=sqlite:///./crossreg_runs.db
# Concurrent pairs during register (overridden by --workers)
CROSSREG_THREADS=4
CROSSREG_LOG_LEVEL=INFO
"""
        with open(env_file, 'w') as f:
            f.write(env_content)
        print("✅ Created .env file with default settings")

    for directory in ["data", "results"]:
        (APP_DIR / directory).mkdir(exist_ok=True)
        print(f"✅ Created directory: {directory}")

    print("Initializing results store...")
    init_command = (
        f"{sys.executable} -c \"from database import DatabaseManager, database_url; "
        "url = database_url(); DatabaseManager(url).init_database() if url else None\""
    )
    if run_command(init_command, cwd=APP_DIR):
        print("✅ Results store initialized")
    else:
        print("⚠️  Results store initialization failed, but continuing setup")

    return True


def create_startup_scripts():
    """
    Create convenient startup scripts.
    """
    print("\n📝 Creating startup scripts...")

    selftest_script = """#!/bin/bash
# Crossreg Self-Test

echo "🔬 Running the crossreg self-test..."

cd crossreg
python main.py selftest --out results/selftest
"""

    benchmark_script = """#!/bin/bash
# Crossreg Standard Benchmark
# Generates the standard suite (if missing) and runs every ablation row.

set -e
cd crossreg

if [ ! -d "data/standard_suite" ]; then
    echo "🧪 Generating the standard suite..."
    python main.py gen --config configs/standard_suite.ini --out data/standard_suite --count 50
fi

echo "🚀 Registering the standard suite..."
python main.py register data/standard_suite --config configs/pipeline.ini --ablation all --out results/standard_suite "$@"
"""

    scripts = [
        ("start-selftest.sh", selftest_script),
        ("start-benchmark.sh", benchmark_script),
    ]

    for script_name, script_content in scripts:
        with open(script_name, 'w') as f:
            f.write(script_content)

        if os.name != 'nt':
            os.chmod(script_name, 0o755)

        print(f"✅ Created {script_name}")


def print_next_steps():
    """
    Print instructions for the user.
    """
    print("\n🎉 Setup Complete!")
    print("\n📋 Next Steps:")
    print("1. Check the installation:")
    print("   ./start-selftest.sh")
    print("\n2. Run the standard benchmark:")
    print("   ./start-benchmark.sh")
    print("\n3. Or use the CLI directly from crossreg/:")
    print("   python main.py gen --out data/demo --count 5")
    print("   python main.py register data/demo --estimator all --out results/demo")
    print("   python main.py eval results/demo --sweep 1:0.1 2:0.5 5:1")
    print("\n📚 For more information, see README.md")


def main():
    """
    Main setup function.
    """
    print("📡 Crossreg Setup")
    print("=" * 50)

    if not check_prerequisites():
        print("\n❌ Prerequisites not met. Please install required tools and try again.")
        sys.exit(1)

    if not setup_application():
        print("\n❌ Setup failed. Please check the errors above.")
        sys.exit(1)

    create_startup_scripts()
    print_next_steps()


if __name__ == "__main__":
    # Invoked by a build backend (pip install): declare the package instead
    # of running the interactive setup.
    if len(sys.argv) > 1:
        from setuptools import setup

        setup(
            name="crossreg",
            version="0.1.0",
            package_dir={"": "crossreg"},
            py_modules=["main", "errors", "database", "models"],
            packages=["stages"],
            install_requires=["numpy", "scipy", "pydantic", "sqlalchemy", "python-dotenv"],
        )
    else:
        main()
