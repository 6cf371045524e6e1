"""Check if all required dependencies are installed correctly"""

import sys


def check_dependency(package_name, import_name=None):
    """Check if a package is installed and can be imported"""
    if import_name is None:
        import_name = package_name

    try:
        module = __import__(import_name)
        version = getattr(module, "__version__", "unknown version")
        print(f"✅ {package_name} - Installed ({version})")
        return True
    except ImportError:
        print(f"❌ {package_name} - NOT installed")
        return False


def main():
    print("Checking xLSTM Engine Dependencies")
    print("=" * 50)

    tensor_dependencies = [
        ("PyTorch", "torch"),
        ("einops", "einops"),
        ("NumPy", "numpy"),
    ]

    service_dependencies = [
        ("FastAPI", "fastapi"),
        ("Uvicorn", "uvicorn"),
        ("HTTPX", "httpx"),
        ("Pydantic", "pydantic"),
        ("Python-Dotenv", "dotenv"),
    ]

    other_dependencies = [
        ("Pandas", "pandas"),
        ("PSUtil", "psutil"),
        ("tqdm", "tqdm"),
        ("pytest", "pytest"),
    ]

    all_installed = True

    print("\n🧮 Tensor Dependencies:")
    for package, import_name in tensor_dependencies:
        if not check_dependency(package, import_name):
            all_installed = False

    print("\n🌐 Service Dependencies:")
    for package, import_name in service_dependencies:
        if not check_dependency(package, import_name):
            all_installed = False

    print("\n⚡ Data, Performance & Testing Dependencies:")
    for package, import_name in other_dependencies:
        if not check_dependency(package, import_name):
            all_installed = False

    print("\n" + "=" * 50)

    if all_installed:
        print("✅ All dependencies are installed!")
        print("\nNext steps:")
        print("1. Run: pytest -m 'not slow' (fast checks)")
        print("2. Run: python -m xlstm_engine analyze --preset xlstm-7b")
        print("3. Run: python run.py (inference service)")
    else:
        print("❌ Some dependencies are missing!")
        print("\nInstall missing packages:")
        print("pip install -r requirements.txt")
        return 1

    print("\n" + "=" * 50)
    print("Checking configuration:")

    from xlstm_engine.config import config

    print(f"Model mode: {config.get_model_mode()}")
    print(f"Precision: {config.DEFAULT_PRECISION}, threads: {config.NUM_THREADS}, checked mode: {config.CHECKED_MODE}")
    if config.MODEL_CHECKPOINT and config.get_model_mode() != "CHECKPOINT":
        print(f"⚠️  MODEL_CHECKPOINT={config.MODEL_CHECKPOINT} does not exist; the service will use a random-init model")
    return 0


if __name__ == "__main__":
    sys.exit(main())
