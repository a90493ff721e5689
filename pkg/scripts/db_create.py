import sys
import sqlite3

from covadj.dbutil import setup_db_tables


def setup_db(path):
    conn = sqlite3.connect(path)
    return conn


if __name__ == "__main__":
    """ This is a script for creating the database used to record runs"""
    path = sys.argv[1] if len(sys.argv) > 1 else "covadj.db"
    print(f"SETTING UP DATABASE {path}")
    connection = setup_db(path)
    setup_db_tables(connection)
    connection.close()
    print("DONE SETTING UP DATABASE")
