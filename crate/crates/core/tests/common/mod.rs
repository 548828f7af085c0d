#![allow(dead_code)]

pub mod ledger_model;
pub mod traces;
