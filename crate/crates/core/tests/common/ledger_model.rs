//! Brute-force reference for the buffer ledger: an explicit map of page
//! states replayed one operation at a time, compared against the real
//! ledger after every step.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upager::buffer::{BufferLedger, EvictionPolicy, FlushClaim, PageDescriptor, PageKey, PageState, Reservation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum S {
    Filling,
    Present,
    Evicting,
}

#[derive(Debug, Clone, Copy)]
struct P {
    s: S,
    size: usize,
    dirty: bool,
    flushing: bool,
    seq: u64,
}

struct Model {
    capacity: usize,
    high: usize,
    low: usize,
    lru: bool,
    pages: HashMap<PageKey, P>,
    clock: u64,
}

impl Model {
    fn state(&self, k: PageKey) -> PageState {
        match self.pages.get(&k) {
            None => PageState::Absent,
            Some(p) => match p.s {
                S::Filling => PageState::Filling,
                S::Evicting => PageState::Evicting,
                S::Present if p.dirty => PageState::PresentDirty,
                S::Present => PageState::PresentClean,
            },
        }
    }

    fn resident(&self) -> usize {
        self.pages.values().map(|p| p.size).sum()
    }

    fn evicting(&self) -> usize {
        self.pages.values().filter(|p| p.s == S::Evicting).map(|p| p.size).sum()
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn order(&self) -> Vec<PageKey> {
        let mut v: Vec<(u64, PageKey)> = self
            .pages
            .iter()
            .filter(|(_, p)| p.s == S::Present)
            .map(|(k, p)| (p.seq, *k))
            .collect();
        v.sort();
        v.into_iter().map(|(_, k)| k).collect()
    }

    fn take(&mut self, target: usize) -> Vec<PageKey> {
        let mut sum = 0;
        let mut out = Vec::new();
        for k in self.order() {
            if sum >= target {
                break;
            }
            let p = self.pages[&k];
            if p.flushing {
                continue;
            }
            sum += p.size;
            out.push(k);
        }
        for k in &out {
            self.pages.get_mut(k).unwrap().s = S::Evicting;
        }
        out
    }

    fn reserve(&mut self, k: PageKey, size: usize) -> Reservation {
        match self.pages.get(&k).map(|p| p.s) {
            Some(S::Filling) | Some(S::Evicting) => Reservation::AlreadyInFlight(self.state(k)),
            Some(S::Present) => {
                if self.lru {
                    let t = self.tick();
                    self.pages.get_mut(&k).unwrap().seq = t;
                }
                Reservation::AlreadyPresent
            }
            None if self.resident() + size > self.capacity => Reservation::NeedsEviction,
            None => {
                self.pages.insert(
                    k,
                    P {
                        s: S::Filling,
                        size,
                        dirty: false,
                        flushing: false,
                        seq: 0,
                    },
                );
                Reservation::Reserved
            }
        }
    }

    fn plan(&mut self, extra: usize) -> Option<Vec<PageKey>> {
        let effective = self.resident() - self.evicting();
        let shortfall = (effective + extra).saturating_sub(self.capacity);
        if effective < self.high && (extra == 0 || shortfall == 0) {
            return None;
        }
        let target = effective.saturating_sub(self.low).max(shortfall);
        if target == 0 {
            return None;
        }
        let v = self.take(target);
        (!v.is_empty()).then_some(v)
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Reserve(PageKey),
    Commit(PageKey),
    AbortFill(PageKey),
    Dirty(PageKey),
    BeginFlush(PageKey, bool),
    EndFlush(PageKey, bool),
    Select(usize),
    Plan(usize),
    AbortEviction(PageKey),
    Release(PageKey),
    ClaimRegion(u32),
}

fn keys(d: &[PageDescriptor]) -> Vec<PageKey> {
    d.iter().map(|d| d.key).collect()
}

/// Runs one random legal sequence of `steps` operations. Returns the first
/// divergence between ledger and model.
pub fn run_sequence(seed: u64, steps: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| 4096 << rng.gen_range(0..4)).collect();
    let unit = *sizes.iter().max().unwrap();
    let capacity = unit * rng.gen_range(4..=48);
    let high = rng.gen_range(2..=100u8);
    let low = rng.gen_range(0..high);
    let lru = rng.gen_bool(0.8);
    let policy = if lru { EvictionPolicy::Lru } else { EvictionPolicy::Fifo };
    let ledger = BufferLedger::new(capacity, high, low, policy);
    let mut m = Model {
        capacity,
        high: capacity * high as usize / 100,
        low: capacity * low as usize / 100,
        lru,
        pages: HashMap::new(),
        clock: 0,
    };
    if ledger.high_bytes() != m.high || ledger.low_bytes() != m.low {
        return Err("watermark bytes differ".into());
    }
    let pages_per_region = 512 / sizes.len() as u64;
    let size_of = |k: PageKey| sizes[k.region as usize];
    let random_key = |rng: &mut ChaCha8Rng| {
        PageKey::new(rng.gen_range(0..sizes.len() as u32), rng.gen_range(0..pages_per_region))
    };

    for step in 0..steps {
        let with = |pred: &dyn Fn(&P) -> bool, rng: &mut ChaCha8Rng| {
            let mut ks: Vec<PageKey> = m.pages.iter().filter(|(_, p)| pred(p)).map(|(k, _)| *k).collect();
            ks.sort();
            ks.choose(rng).copied()
        };
        let illegal = rng.gen_bool(0.05);
        let op = match rng.gen_range(0..11) {
            _ if illegal => match rng.gen_range(0..4) {
                0 => Op::Commit(random_key(&mut rng)),
                1 => Op::Release(random_key(&mut rng)),
                2 => Op::Dirty(random_key(&mut rng)),
                _ => Op::AbortEviction(random_key(&mut rng)),
            },
            0 | 1 => Op::Reserve(random_key(&mut rng)),
            2 => with(&|p| p.s == S::Present, &mut rng).map_or(Op::Reserve(random_key(&mut rng)), Op::Reserve),
            3 => with(&|p| p.s == S::Filling, &mut rng).map_or(Op::Reserve(random_key(&mut rng)), Op::Commit),
            4 => with(&|p| p.s == S::Filling, &mut rng).map_or(Op::Select(unit), Op::AbortFill),
            5 => with(&|p| p.s == S::Present, &mut rng).map_or(Op::Plan(0), Op::Dirty),
            6 => match with(&|p| p.flushing, &mut rng) {
                Some(k) if rng.gen_bool(0.6) => Op::EndFlush(k, rng.gen_bool(0.8)),
                _ => with(&|p| p.s == S::Present, &mut rng)
                    .map_or(Op::Plan(unit), |k| Op::BeginFlush(k, rng.gen_bool(0.3))),
            },
            7 => Op::Select(rng.gen_range(0..=3 * unit)),
            8 => Op::Plan(if rng.gen_bool(0.5) { 0 } else { sizes[rng.gen_range(0..sizes.len())] }),
            9 => match with(&|p| p.s == S::Evicting, &mut rng) {
                Some(k) if rng.gen_bool(0.2) => Op::AbortEviction(k),
                Some(k) => Op::Release(k),
                None => Op::Reserve(random_key(&mut rng)),
            },
            _ => {
                if rng.gen_bool(0.1) {
                    Op::ClaimRegion(rng.gen_range(0..sizes.len() as u32))
                } else {
                    with(&|p| p.s == S::Filling, &mut rng).map_or(Op::Reserve(random_key(&mut rng)), Op::Commit)
                }
            }
        };
        let fail = |what: String| Err(format!("seed {seed} step {step} {op:?}: {what}"));

        match op {
            Op::Reserve(k) => {
                let (a, b) = (ledger.reserve_slot(k, size_of(k)), m.reserve(k, size_of(k)));
                if a != b {
                    return fail(format!("ledger {a:?}, model {b:?}"));
                }
            }
            Op::Commit(k) => {
                let legal = m.pages.get(&k).is_some_and(|p| p.s == S::Filling);
                let r = ledger.commit_fill(k);
                if r.is_ok() != legal {
                    return fail(format!("ledger {r:?}, model legal={legal}"));
                }
                if legal {
                    let t = m.tick();
                    let p = m.pages.get_mut(&k).unwrap();
                    p.s = S::Present;
                    p.seq = t;
                }
            }
            Op::AbortFill(k) => {
                let legal = m.pages.get(&k).is_some_and(|p| p.s == S::Filling);
                if ledger.abort_fill(k).is_ok() != legal {
                    return fail("abort_fill legality".into());
                }
                if legal {
                    m.pages.remove(&k);
                }
            }
            Op::Dirty(k) => {
                let legal = m.pages.get(&k).is_some_and(|p| p.s == S::Present);
                if ledger.mark_dirty(k).is_ok() != legal {
                    return fail("mark_dirty legality".into());
                }
                if legal {
                    m.pages.get_mut(&k).unwrap().dirty = true;
                }
            }
            Op::BeginFlush(k, keep) => {
                let expect = match m.pages.get_mut(&k) {
                    None => FlushClaim::NotDirty,
                    Some(p) if p.s != S::Present || p.flushing => FlushClaim::Busy,
                    Some(p) if !p.dirty => FlushClaim::NotDirty,
                    Some(p) => {
                        p.flushing = true;
                        p.dirty = keep;
                        FlushClaim::Claimed
                    }
                };
                let got = ledger.begin_flush(k, keep);
                if got != expect {
                    return fail(format!("ledger {got:?}, model {expect:?}"));
                }
            }
            Op::EndFlush(k, written) => {
                let legal = m.pages.get(&k).is_some_and(|p| p.flushing);
                if ledger.end_flush(k, written).is_ok() != legal {
                    return fail("end_flush legality".into());
                }
                if legal {
                    let p = m.pages.get_mut(&k).unwrap();
                    p.flushing = false;
                    if !written {
                        p.dirty = true;
                    }
                }
            }
            Op::Select(target) => {
                let got = ledger.select_victims(target);
                let expect = if target == 0 { Some(vec![]) } else { Some(m.take(target)) };
                match (got, expect) {
                    (Ok(v), Some(e)) if keys(&v) == e && (target == 0 || !e.is_empty()) => {
                        if v.windows(2).any(|w| w[0].residency_seq >= w[1].residency_seq) {
                            return fail("victims not in ascending residency order".into());
                        }
                    }
                    (Err(_), Some(e)) if e.is_empty() && target > 0 => {}
                    (g, e) => return fail(format!("ledger {g:?}, model {e:?}")),
                }
            }
            Op::Plan(extra) => {
                let got = ledger.plan_eviction(extra).map(|p| keys(&p.victims));
                let expect = m.plan(extra);
                if got != expect {
                    return fail(format!("ledger {got:?}, model {expect:?}"));
                }
            }
            Op::AbortEviction(k) => {
                let legal = m.pages.get(&k).is_some_and(|p| p.s == S::Evicting);
                if ledger.abort_eviction(k).is_ok() != legal {
                    return fail("abort_eviction legality".into());
                }
                if legal {
                    let t = m.tick();
                    let p = m.pages.get_mut(&k).unwrap();
                    p.s = S::Present;
                    p.seq = t;
                }
            }
            Op::Release(k) => {
                let legal = m.pages.get(&k).is_some_and(|p| p.s == S::Evicting);
                let r = ledger.release_slot(k);
                if r.is_ok() != legal {
                    return fail("release legality".into());
                }
                if let Ok(d) = r {
                    let p = m.pages.remove(&k).unwrap();
                    if d.dirty != p.dirty {
                        return fail("released page dirty flag differs".into());
                    }
                }
            }
            Op::ClaimRegion(region) => {
                let (claimed, busy) = ledger.claim_region(region);
                let mut expect = Vec::new();
                let mut expect_busy = 0;
                let mut ks: Vec<PageKey> = m.pages.keys().filter(|k| k.region == region).copied().collect();
                ks.sort();
                for k in ks {
                    let p = m.pages.get_mut(&k).unwrap();
                    if p.s != S::Present || p.flushing {
                        expect_busy += 1;
                    } else {
                        p.s = S::Evicting;
                        expect.push(k);
                    }
                }
                if keys(&claimed) != expect || busy != expect_busy {
                    return fail(format!("claimed {:?}/{busy}, model {expect:?}/{expect_busy}", keys(&claimed)));
                }
            }
        }

        compare(&ledger, &m).or_else(fail)?;
    }
    Ok(())
}

fn compare(ledger: &BufferLedger, m: &Model) -> Result<(), String> {
    ledger.check_invariants()?;
    let occ = ledger.occupancy_stats();
    let resident = m.resident();
    if occ.resident_bytes != resident {
        return Err(format!("resident {} vs model {resident}", occ.resident_bytes));
    }
    if resident > m.capacity {
        return Err("resident exceeds capacity".into());
    }
    let dirty: usize = m.pages.values().filter(|p| p.dirty).map(|p| p.size).sum();
    if occ.dirty_bytes != dirty {
        return Err(format!("dirty {} vs model {dirty}", occ.dirty_bytes));
    }
    if occ.above_high != (resident >= m.high) || occ.at_or_below_low != (resident <= m.low) {
        return Err("watermark flags differ".into());
    }
    let mut pages = ledger.pages();
    pages.sort_by_key(|d| d.key);
    if pages.len() != m.pages.len() {
        return Err(format!("{} pages vs model {}", pages.len(), m.pages.len()));
    }
    for d in &pages {
        let p = m.pages.get(&d.key).ok_or(format!("{:?} unknown to model", d.key))?;
        if d.state != m.state(d.key) || d.page_size != p.size || d.flushing != p.flushing || d.dirty != p.dirty {
            return Err(format!("{:?} is {d:?}, model {p:?}", d.key));
        }
    }
    if keys(&ledger.eviction_order()) != m.order() {
        return Err("eviction order differs".into());
    }
    Ok(())
}
