from rclsieve.cli import main

main()
