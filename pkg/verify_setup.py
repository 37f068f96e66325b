#!/usr/bin/env python
"""
cryoinr Setup Verification Script
Verifies that the Python environment, required packages and the core file
formats work on this machine. Run it after installing requirements.txt.
"""

import sys
import os
import platform
from pathlib import Path

def print_header(title):
    """Print a formatted header."""
    print("\n" + "=" * 70)
    print(f"  {title}")
    print("=" * 70)

def print_check(item, status, message=""):
    """Print a check result."""
    status_symbol = "✓" if status else "✗"
    status_text = "OK" if status else "FAIL"
    color = "\033[92m" if status else "\033[91m"  # Green or Red
    reset = "\033[0m"

    if message:
        print(f"  [{status_symbol}] {item}: {color}{status_text}{reset} - {message}")
    else:
        print(f"  [{status_symbol}] {item}: {color}{status_text}{reset}")

    return status

def check_python_version():
    """Check if Python version is compatible."""
    print_header("Python Environment")

    version = sys.version_info
    version_str = f"{version.major}.{version.minor}.{version.micro}"
    print(f"  Python version: {version_str}")
    print(f"  Python executable: {sys.executable}")
    print(f"  Platform: {platform.platform()}")

    is_ok = version.major == 3 and version.minor >= 9
    print_check("Python version", is_ok,
                "Requires Python 3.9 or higher" if not is_ok else "Compatible")

    return is_ok

def check_package(import_name):
    """Return the module version string, or None if it cannot be imported."""
    try:
        module = __import__(import_name)
        return getattr(module, '__version__', 'installed')
    except ImportError:
        return None

def check_required_packages():
    """Check if all required packages are installed."""
    print_header("Required Python Packages")

    packages = ["numpy", "pandas", "requests", "tqdm"]
    all_ok = True
    for name in packages:
        version = check_package(name)
        print_check(name, version is not None, version or "NOT INSTALLED")
        all_ok = all_ok and version is not None

    # numpy >= 1.22 is needed for smallest_subnormal and packbits(bitorder=)
    version = check_package("numpy")
    if version:
        major, minor = (int(part) for part in version.split('.')[:2])
        numpy_ok = (major, minor) >= (1, 22)
        print_check("numpy >= 1.22", numpy_ok, version)
        all_ok = all_ok and numpy_ok

    for name in ["pytest", "mrcfile", "mpmath"]:
        version = check_package(name)
        print_check(f"{name} (optional)", True, version or "not installed - tests only")

    if not all_ok:
        print("\n  To install missing packages, run:")
        print("    pip install -r requirements.txt")

    return all_ok

def check_python_files():
    """Check if the application modules exist."""
    print_header("Application Files")

    files = [
        "config.py",
        "errors.py",
        "mrc_io.py",
        "preprocess.py",
        "inr_core.py",
        "loss_opt.py",
        "trainer.py",
        "codec.py",
        "metrics.py",
        "synth.py",
        "emdb_fetch.py",
        "cryoinr.py",
    ]

    here = Path(__file__).resolve().parent
    all_ok = True
    for filename in files:
        exists = (here / filename).exists()
        print_check(filename, exists, "Found" if exists else "MISSING")
        all_ok = all_ok and exists

    return all_ok

def check_round_trip():
    """Write and read a small map, then pack and unpack its occupancy, all in memory."""
    print_header("Format Smoke Test")

    try:
        import numpy as np
        from mrc_io import VoxelGrid, read_mrc, write_mrc
        from preprocess import compress_occupancy, decompress_occupancy, threshold_and_map

        rng = np.random.default_rng(0)
        grid = VoxelGrid.from_array(rng.normal(size=(5, 6, 7)).astype(np.float32))
        back = read_mrc(write_mrc(grid))
        mrc_ok = np.array_equal(back.data, grid.data) and back.dims == grid.dims
        print_check("MRC write/read", mrc_ok, f"{grid.dims} grid")

        occ, _ = threshold_and_map(back, 0.0)
        occ_ok = decompress_occupancy(compress_occupancy(occ)) == occ
        print_check("Occupancy DEFLATE round trip", occ_ok, f"{occ.popcount} occupied voxels")
        return mrc_ok and occ_ok
    except Exception as e:
        print_check("Format smoke test", False, f"Error: {e}")
        return False

def check_writable_directory():
    """Check that archives can be written next to the working directory."""
    print_header("Working Directory")

    current_dir = Path.cwd()
    print(f"  Current directory: {current_dir}")
    writable = os.access(current_dir, os.W_OK)
    print_check("Directory writable", writable,
                "Archives and logs can be written" if writable else "Choose a writable directory")
    return True  # Not critical

def print_summary(checks_passed, total_checks):
    """Print summary of verification."""
    print_header("Verification Summary")

    percentage = (checks_passed / total_checks * 100) if total_checks > 0 else 0

    print(f"  Checks passed: {checks_passed}/{total_checks} ({percentage:.0f}%)")
    print()

    if checks_passed == total_checks:
        print("  ✓ All critical checks passed!")
        print()
        print("  Try a desk-scale run:")
        print("    python cryoinr.py synth --shape 32 --blobs 4 --seed 42 -o t.mrc")
        print("    python cryoinr.py compress t.mrc -o t.cemz --arch desk --epochs 50")
        print("    python cryoinr.py decompress t.cemz -o recon/")
        print("    python cryoinr.py evaluate t.mrc recon/t.mrc")
    else:
        print("  ✗ Some checks failed.")
        print("  Please resolve the issues above before using cryoinr.")

    print()

def main():
    """Main verification routine."""
    print("\n" + "=" * 70)
    print("  CRYOINR SETUP VERIFICATION")
    print("=" * 70)

    sys.path.insert(0, str(Path(__file__).resolve().parent))

    checks = []
    checks.append(("Python Version", check_python_version()))
    checks.append(("Required Packages", check_required_packages()))
    checks.append(("Python Files", check_python_files()))
    checks.append(("Working Directory", check_writable_directory()))
    if checks[1][1]:
        checks.append(("Format Smoke Test", check_round_trip()))

    checks_passed = sum(1 for _, passed in checks if passed)
    total_checks = len(checks)

    print_summary(checks_passed, total_checks)

    return 0 if checks_passed == total_checks else 1

if __name__ == "__main__":
    try:
        exit_code = main()
        sys.exit(exit_code)
    except KeyboardInterrupt:
        print("\n\nVerification cancelled by user.")
        sys.exit(1)
    except Exception as e:
        print(f"\n\nUnexpected error during verification: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)
