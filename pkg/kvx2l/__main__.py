from kvx2l.main import main

if __name__ == "__main__":
    main()
