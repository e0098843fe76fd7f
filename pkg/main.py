import sys
import os

# Ensure the core/services/cli modules are importable
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from cli.app import main

if __name__ == "__main__":
    sys.exit(main())
