pub fn dispatch(_argv: Vec<String>) -> i32 { 2 }
