# adaptlab tests
