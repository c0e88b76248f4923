"""
Main entry point for Fair Translate.
"""
from src.cli import main


if __name__ == "__main__":
    main()
