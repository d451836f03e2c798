# src/lrclone/__main__.py
"""
Allow lrclone to be run as a module with python -m lrclone
"""

from .cli import main

if __name__ == "__main__":
    main()
