# Keeps the repository root on sys.path so the flat top-level modules import under plain `pytest`.
