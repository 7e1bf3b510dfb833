//! Append-only per-queue journals: `<dir>/<queue>.journal`, one JSON
//! [`JournalEvent`] per line. Opening a directory replays every journal,
//! returns the surviving messages and compacts each file down to them.
//!
//! Lines are written without fsync, so journals survive a process crash but
//! not necessarily a power loss. A torn final line is ignored on replay.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use pipewise_core::broker::{JournalEvent, Message};

const SUFFIX: &str = ".journal";

pub struct Journal {
    dir: PathBuf,
    files: HashMap<String, File>,
    queues: Vec<String>,
}

impl Journal {
    pub fn open(dir: &Path) -> io::Result<(Self, Vec<Message>)> {
        fs::create_dir_all(dir)?;
        let mut names: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(SUFFIX)).map(String::from))
            .collect();
        names.sort();

        // Removals can land in a different file than the enqueue (never, for
        // now, but replay does not rely on it), so collect them globally.
        let mut enqueued: BTreeMap<String, Vec<Message>> = BTreeMap::new();
        let mut removed: HashSet<(String, String)> = HashSet::new();
        for q in &names {
            let file = File::open(dir.join(format!("{q}{SUFFIX}")))?;
            for line in BufReader::new(file).lines() {
                let line = line?;
                match serde_json::from_str::<JournalEvent>(&line) {
                    Ok(JournalEvent::Enqueued { message }) => enqueued.entry(message.queue.clone()).or_default().push(message),
                    Ok(JournalEvent::Removed { queue, msg_id }) => {
                        removed.insert((queue, msg_id));
                    }
                    Err(e) => log::warn!("skipping journal line in {q}: {e}"),
                }
            }
        }

        let mut survivors = Vec::new();
        for q in &names {
            let alive: Vec<Message> = enqueued
                .remove(q)
                .unwrap_or_default()
                .into_iter()
                .filter(|m| !removed.contains(&(m.queue.clone(), m.msg_id.clone())))
                .collect();
            let path = dir.join(format!("{q}{SUFFIX}"));
            let tmp = dir.join(format!("{q}{SUFFIX}.tmp"));
            {
                let mut f = File::create(&tmp)?;
                for m in &alive {
                    let line = serde_json::to_string(&JournalEvent::Enqueued { message: m.clone() }).expect("event serializes");
                    writeln!(f, "{line}")?;
                }
                f.sync_all()?;
            }
            fs::rename(&tmp, &path)?;
            survivors.extend(alive);
        }
        Ok((Self { dir: dir.to_path_buf(), files: HashMap::new(), queues: names }, survivors))
    }

    /// Queues that had a journal when it was opened.
    pub fn queues(&self) -> Vec<String> {
        self.queues.clone()
    }

    /// Creates the queue's journal so an empty declared queue survives a
    /// restart.
    pub fn touch(&mut self, queue: &str) -> io::Result<()> {
        self.file(queue).map(|_| ())
    }

    fn file(&mut self, queue: &str) -> io::Result<&mut File> {
        if !self.files.contains_key(queue) {
            let f = OpenOptions::new().create(true).append(true).open(self.dir.join(format!("{queue}{SUFFIX}")))?;
            self.files.insert(queue.to_string(), f);
        }
        Ok(self.files.get_mut(queue).expect("just inserted"))
    }

    pub fn append(&mut self, events: &[JournalEvent]) -> io::Result<()> {
        for e in events {
            let queue = match e {
                JournalEvent::Enqueued { message } => &message.queue,
                JournalEvent::Removed { queue, .. } => queue,
            };
            let file = self.file(&queue.clone())?;
            let mut line = serde_json::to_vec(e).expect("event serializes");
            line.push(b'\n');
            file.write_all(&line)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use crate::messaging::{Bus, Headers, LocalBroker, Subscription};
    use pipewise_core::broker::BrokerConfig;
    use std::time::Duration;

    #[test]
    fn replay_restores_depth() {
        let dir = tempfile::tempdir().unwrap();
        {
            let b = LocalBroker::with_journal(BrokerConfig::default(), dir.path()).unwrap();
            b.declare("q.clean").unwrap();
            for i in 0..5u8 {
                b.publish("q.clean", vec![i], Headers::new()).unwrap();
            }
            let s = b.subscribe("q.clean", 2).unwrap();
            let m = s.recv_timeout(Duration::from_secs(1)).unwrap().unwrap();
            s.ack(&m.msg_id).unwrap();
            // Second delivery stays unacked: it must survive.
            s.recv_timeout(Duration::from_secs(1)).unwrap().unwrap();
            std::mem::forget(s);
        }
        let b = LocalBroker::with_journal(BrokerConfig::default(), dir.path()).unwrap();
        let st = b.stats("q.clean").unwrap();
        assert_eq!(st.depth, 4);
        let s = b.subscribe("q.clean", 10).unwrap();
        let first = s.recv_timeout(Duration::from_secs(1)).unwrap().unwrap();
        assert_eq!(first.payload, vec![1]);
    }
}
