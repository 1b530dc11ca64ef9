// SPDX-License-Identifier: Apache-2.0
#include "nvib/tokenizer.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "nvib/model.hpp"  // special token ids

namespace nvib {

std::vector<std::uint32_t> Tokenizer::utf8_decode(const std::string& text) {
    std::vector<std::uint32_t> out;
    const auto* s = reinterpret_cast<const unsigned char*>(text.data());
    const std::size_t n = text.size();
    std::size_t i = 0;
    while (i < n) {
        const unsigned char b0 = s[i];
        int extra = 0;
        std::uint32_t cp = b0;
        if (b0 < 0x80) {
            extra = 0;
        } else if ((b0 & 0xE0) == 0xC0) {
            extra = 1;
            cp = b0 & 0x1F;
        } else if ((b0 & 0xF0) == 0xE0) {
            extra = 2;
            cp = b0 & 0x0F;
        } else if ((b0 & 0xF8) == 0xF0) {
            extra = 3;
            cp = b0 & 0x07;
        } else {
            out.push_back(b0);  // stray continuation byte: keep as-is
            ++i;
            continue;
        }
        if (i + extra >= n) {  // truncated sequence at end of string
            out.push_back(b0);
            ++i;
            continue;
        }
        bool ok = true;
        for (int k = 1; k <= extra; ++k)
            if ((s[i + k] & 0xC0) != 0x80) ok = false;
        if (!ok) {
            out.push_back(b0);
            ++i;
            continue;
        }
        for (int k = 1; k <= extra; ++k) cp = (cp << 6) | (s[i + k] & 0x3F);
        out.push_back(cp);
        i += 1 + extra;
    }
    return out;
}

std::string Tokenizer::utf8_encode_one(std::uint32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus) {
    std::set<std::uint32_t> chars;
    for (const std::string& line : corpus)
        for (std::uint32_t cp : utf8_decode(line)) chars.insert(cp);
    if (chars.empty())
        throw std::invalid_argument("Tokenizer::build: corpus contains no characters");
    Tokenizer tok;
    tok.codepoints_.assign(chars.begin(), chars.end());  // set iterates sorted
    for (int i = 0; i < static_cast<int>(tok.codepoints_.size()); ++i)
        tok.to_id_[tok.codepoints_[i]] = 4 + i;
    return tok;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    for (std::uint32_t cp : utf8_decode(text)) {
        const auto it = to_id_.find(cp);
        ids.push_back(it == to_id_.end() ? kUnkId : it->second);
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id == kPadId || id == kBosId || id == kEosId) continue;
        if (id == kUnkId) {
            out += utf8_encode_one(0xFFFD);
            continue;
        }
        const int k = id - 4;
        if (k < 0 || k >= static_cast<int>(codepoints_.size()))
            throw std::out_of_range("Tokenizer::decode: id out of range: " + std::to_string(id));
        out += utf8_encode_one(codepoints_[k]);
    }
    return out;
}

std::string Tokenizer::to_json() const {
    nlohmann::json j;
    j["codepoints"] = codepoints_;
    return j.dump();
}

Tokenizer Tokenizer::from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    Tokenizer tok;
    tok.codepoints_ = j.at("codepoints").get<std::vector<std::uint32_t>>();
    if (!std::is_sorted(tok.codepoints_.begin(), tok.codepoints_.end()))
        throw std::invalid_argument("Tokenizer::from_json: codepoints must be sorted");
    for (int i = 0; i < static_cast<int>(tok.codepoints_.size()); ++i)
        tok.to_id_[tok.codepoints_[i]] = 4 + i;
    return tok;
}

}  // namespace nvib
