from src.cli import main


if __name__ == "__main__":
    # Run the command-line interface
    main()
