#pragma once

// Shared fixtures: tiny tokenizers and hand-built dialogue records with
// known token counts.

#include <string>
#include <vector>

#include "sumtune/corpus.hpp"
#include "sumtune/tokenizer.hpp"

namespace sumtune::testsupport {

// Byte-level tokenizer with no merges: one token per byte, so token counts
// equal byte counts and are easy to reason about by hand.
inline TokenizerModel byte_tokenizer() { return train_bpe({"ab"}, 259); }

inline DialogueRecord csds_record(const std::string& id = "c1") {
    DialogueRecord r;
    r.id = id;
    r.turns = {{Role::user, "", "我想查一下订单到哪了"},
               {Role::agent, "", "您好，订单已经发货，正在派送中"},
               {Role::user, "", "大概什么时候到"},
               {Role::agent, "", "预计明天下午送达"}};
    r.summaries[SummaryType::agent] = "客服告知订单已发货，预计明天下午送达。";
    r.summaries[SummaryType::user] = "用户询问订单物流进度。";
    r.summaries[SummaryType::all] = "用户询问订单物流进度，客服告知已发货且预计明天下午送达。";
    return r;
}

inline DialogueRecord samsum_record(const std::string& id = "s1") {
    DialogueRecord r;
    r.id = id;
    r.turns = {{Role::named, "Amanda", "hey, are you coming to the party?"},
               {Role::named, "Jerry", "sure, I will bring snacks"}};
    r.summaries[SummaryType::all] = "Jerry will come to the party and bring snacks.";
    return r;
}

}  // namespace sumtune::testsupport
